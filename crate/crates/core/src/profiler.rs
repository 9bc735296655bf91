//! Activation statistics over a probe corpus: per-neuron FFN activation
//! magnitudes and per-layer residual-stream shifts.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hexfloat;
use crate::model::TransformerModel;
use crate::tensor;

/// Token sequences the model is run over while profiling.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeCorpus {
    sequences: Vec<Vec<u32>>,
    pub source: String,
}

impl ProbeCorpus {
    pub fn new(sequences: Vec<Vec<u32>>, source: impl Into<String>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus("probe corpus has no sequences".into()));
        }
        if let Some(i) = sequences.iter().position(|s| s.len() < 2) {
            return Err(Error::SequenceTooShort(format!("probe sequence {i} has fewer than 2 tokens")));
        }
        Ok(Self {
            sequences,
            source: source.into(),
        })
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// How per-position values are reduced to one score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Aggregation {
    Max,
    Mean,
    /// Linear-interpolated quantile, `q ∈ [0, 1]`.
    Quantile(f32),
}

impl Aggregation {
    pub fn tag(&self) -> String {
        match self {
            Aggregation::Max => "max".into(),
            Aggregation::Mean => "mean".into(),
            Aggregation::Quantile(q) => format!("quantile:{q}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            _ => {
                let q = s
                    .strip_prefix("quantile:")
                    .and_then(|q| q.parse::<f32>().ok())
                    .ok_or_else(|| Error::Parse(format!("unknown aggregation `{s}`")))?;
                if !(0.0..=1.0).contains(&q) {
                    return Err(Error::Parse(format!("quantile {q} outside [0, 1]")));
                }
                Ok(Aggregation::Quantile(q))
            }
        }
    }
}

/// Streaming reducer for one score.
#[derive(Clone, Debug)]
enum Acc {
    Max(f32),
    Mean(f64),
    All(Vec<f32>),
}

impl Acc {
    fn new(mode: Aggregation) -> Self {
        match mode {
            Aggregation::Max => Acc::Max(0.0),
            Aggregation::Mean => Acc::Mean(0.0),
            Aggregation::Quantile(_) => Acc::All(Vec::new()),
        }
    }

    fn push(&mut self, v: f32) {
        match self {
            Acc::Max(m) => *m = m.max(v),
            Acc::Mean(s) => *s += v as f64,
            Acc::All(a) => a.push(v),
        }
    }

    fn finish(self, mode: Aggregation, count: usize) -> f32 {
        match (self, mode) {
            (Acc::Max(m), _) => m,
            (Acc::Mean(s), _) => (s / count as f64) as f32,
            (Acc::All(mut a), Aggregation::Quantile(q)) => quantile(&mut a, q),
            (Acc::All(_), _) => unreachable!("collector only built for quantile mode"),
        }
    }
}

fn quantile(values: &mut [f32], q: f32) -> f32 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q as f64 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    (values[lo] as f64 * (1.0 - t) + values[hi] as f64 * t) as f32
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationProfile {
    /// `scores[ℓ][j]` for neuron `j` of layer `ℓ`.
    pub scores: Vec<Vec<f32>>,
    pub mode: Aggregation,
    pub weight_by_down_row: bool,
    pub token_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerImportance {
    pub scores: Vec<f32>,
    pub normalized: bool,
    pub mode: Aggregation,
    pub token_count: usize,
}

fn truncated<'a>(model: &TransformerModel, seq: &'a [u32]) -> &'a [u32] {
    &seq[..seq.len().min(model.config.max_seq_len)]
}

/// Aggregates `|a_ℓ,j|` over every token position of every probe sequence,
/// optionally scaled by `‖row_j(W_down)‖₂`.
pub fn profile_neurons(
    model: &TransformerModel,
    corpus: &ProbeCorpus,
    mode: Aggregation,
    weight_by_down_row: bool,
) -> Result<ActivationProfile> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("probe corpus has no sequences".into()));
    }
    let mut accs: Vec<Vec<Acc>> = model
        .layers
        .iter()
        .map(|l| vec![Acc::new(mode); l.ffn.width()])
        .collect();
    let mut count = 0;
    for seq in corpus.sequences() {
        let seq = truncated(model, seq);
        let (_, trace) = model.forward(seq, true)?;
        let trace = trace.expect("trace requested");
        for (acc, act) in accs.iter_mut().zip(&trace.activations) {
            let w = act.cols();
            for row in act.data().chunks(w) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    a.push(v.abs());
                }
            }
        }
        count += seq.len();
    }
    let scores = accs
        .into_iter()
        .zip(&model.layers)
        .map(|(acc, layer)| {
            let mut s: Vec<f32> = acc.into_iter().map(|a| a.finish(mode, count)).collect();
            if weight_by_down_row {
                for (v, n) in s.iter_mut().zip(layer.ffn.down_row_norms()) {
                    *v *= n;
                }
            }
            s
        })
        .collect();
    Ok(ActivationProfile {
        scores,
        mode,
        weight_by_down_row,
        token_count: count,
    })
}

/// Aggregates the per-position shift `‖h_ℓ − h_{ℓ−1}‖₂` of every layer,
/// optionally divided by `‖h_{ℓ−1}‖₂`.
pub fn profile_layers(
    model: &TransformerModel,
    corpus: &ProbeCorpus,
    mode: Aggregation,
    normalized: bool,
) -> Result<LayerImportance> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("probe corpus has no sequences".into()));
    }
    let d = model.config.d_model;
    let mut accs: Vec<Acc> = (0..model.n_layers()).map(|_| Acc::new(mode)).collect();
    let mut count = 0;
    for seq in corpus.sequences() {
        let seq = truncated(model, seq);
        let (_, trace) = model.forward(seq, true)?;
        let trace = trace.expect("trace requested");
        for (l, acc) in accs.iter_mut().enumerate() {
            let input = trace.layer_inputs[l].data();
            let output = trace.layer_outputs[l].data();
            for (hin, hout) in input.chunks(d).zip(output.chunks(d)) {
                let diff: Vec<f32> = hout.iter().zip(hin).map(|(o, i)| o - i).collect();
                let mut v = tensor::l2(&diff);
                if normalized {
                    let n = tensor::l2(hin);
                    v = if n > 0.0 { v / n } else { 0.0 };
                }
                acc.push(v);
            }
        }
        count += seq.len();
    }
    Ok(LayerImportance {
        scores: accs.into_iter().map(|a| a.finish(mode, count)).collect(),
        normalized,
        mode,
        token_count: count,
    })
}

/// Combines profiles of disjoint corpora as if profiled together. Max is
/// exact; mean weights each part by its token count. Quantile profiles
/// cannot be merged.
pub fn merge_profiles(parts: &[ActivationProfile]) -> Result<ActivationProfile> {
    let first = parts
        .first()
        .ok_or_else(|| Error::ProfileMismatch("nothing to merge".into()))?;
    for p in &parts[1..] {
        let shapes_match = p.scores.len() == first.scores.len()
            && p.scores.iter().zip(&first.scores).all(|(a, b)| a.len() == b.len());
        if p.mode != first.mode || p.weight_by_down_row != first.weight_by_down_row || !shapes_match {
            return Err(Error::ProfileMismatch("parts differ in mode, flags, or shape".into()));
        }
    }
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let total: usize = parts.iter().map(|p| p.token_count).sum();
    let scores = match first.mode {
        Aggregation::Max => first
            .scores
            .iter()
            .enumerate()
            .map(|(l, row)| {
                (0..row.len())
                    .map(|j| parts.iter().fold(0.0f32, |m, p| m.max(p.scores[l][j])))
                    .collect()
            })
            .collect(),
        Aggregation::Mean => first
            .scores
            .iter()
            .enumerate()
            .map(|(l, row)| {
                (0..row.len())
                    .map(|j| {
                        let s: f64 = parts
                            .iter()
                            .map(|p| p.scores[l][j] as f64 * p.token_count as f64)
                            .sum();
                        (s / total as f64) as f32
                    })
                    .collect()
            })
            .collect(),
        Aggregation::Quantile(_) => {
            return Err(Error::ProfileMismatch("quantile profiles cannot be merged".into()));
        }
    };
    Ok(ActivationProfile {
        scores,
        mode: first.mode,
        weight_by_down_row: first.weight_by_down_row,
        token_count: total,
    })
}

fn hex_row(values: &[f32]) -> String {
    values.iter().map(|&v| hexfloat::format(v)).collect::<Vec<_>>().join(" ")
}

fn parse_row(line: &str) -> Result<Vec<f32>> {
    line.split_whitespace().map(hexfloat::parse).collect()
}

fn header_value<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<&'a str> {
    let line = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("missing `{key}` line")))?;
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::Parse(format!("expected `{key}`, found `{line}`")))
}

fn parse_flag(s: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Parse(format!("invalid flag `{s}`"))),
    }
}

impl ActivationProfile {
    pub fn to_text(&self) -> String {
        let mut s = String::from("activation-profile 1\n");
        writeln!(s, "mode {}", self.mode.tag()).unwrap();
        writeln!(s, "weight_by_down_row {}", self.weight_by_down_row as u8).unwrap();
        writeln!(s, "token_count {}", self.token_count).unwrap();
        writeln!(s, "layers {}", self.scores.len()).unwrap();
        for row in &self.scores {
            writeln!(s, "{}", hex_row(row)).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("activation-profile 1") {
            return Err(Error::Parse("not an activation profile".into()));
        }
        let mode = Aggregation::parse(header_value(&mut lines, "mode")?)?;
        let weight_by_down_row = parse_flag(header_value(&mut lines, "weight_by_down_row")?)?;
        let token_count = header_value(&mut lines, "token_count")?
            .parse()
            .map_err(|_| Error::Parse("invalid token_count".into()))?;
        let n: usize = header_value(&mut lines, "layers")?
            .parse()
            .map_err(|_| Error::Parse("invalid layer count".into()))?;
        let scores = (0..n)
            .map(|l| {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Parse(format!("missing scores for layer {l}")))?;
                parse_row(line)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scores,
            mode,
            weight_by_down_row,
            token_count,
        })
    }
}

impl LayerImportance {
    pub fn to_text(&self) -> String {
        let mut s = String::from("layer-importance 1\n");
        writeln!(s, "mode {}", self.mode.tag()).unwrap();
        writeln!(s, "normalized {}", self.normalized as u8).unwrap();
        writeln!(s, "token_count {}", self.token_count).unwrap();
        writeln!(s, "{}", hex_row(&self.scores)).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("layer-importance 1") {
            return Err(Error::Parse("not a layer importance file".into()));
        }
        let mode = Aggregation::parse(header_value(&mut lines, "mode")?)?;
        let normalized = parse_flag(header_value(&mut lines, "normalized")?)?;
        let token_count = header_value(&mut lines, "token_count")?
            .parse()
            .map_err(|_| Error::Parse("invalid token_count".into()))?;
        let scores = parse_row(lines.next().unwrap_or(""))?;
        Ok(Self {
            scores,
            normalized,
            mode,
            token_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn model() -> TransformerModel {
        TransformerModel::init(5, ModelConfig::uniform(16, 16, 2, 16, 2, 24)).unwrap()
    }

    fn probe() -> ProbeCorpus {
        ProbeCorpus::new(vec![vec![1, 2, 3, 4], vec![5, 6, 7], vec![8, 9, 10, 11, 12]], "test").unwrap()
    }

    #[test]
    fn corpus_validation() {
        assert!(matches!(ProbeCorpus::new(vec![], "x"), Err(Error::EmptyCorpus(_))));
        assert!(ProbeCorpus::new(vec![vec![1]], "x").is_err());
    }

    #[test]
    fn dead_gate_scores_zero_in_every_mode() {
        let mut m = model();
        let w = m.layers[1].ffn.width();
        let d = m.config.d_model;
        let gate = m.layers[1].ffn.gate.data_mut();
        for r in 0..d {
            gate[r * w + 3] = 0.0;
        }
        for mode in [Aggregation::Max, Aggregation::Mean, Aggregation::Quantile(0.99)] {
            for weight in [false, true] {
                let p = profile_neurons(&m, &probe(), mode, weight).unwrap();
                assert_eq!(p.scores[1][3], 0.0);
                assert!(p.scores.iter().flatten().all(|&s| s >= 0.0));
            }
        }
    }

    #[test]
    fn single_sequence_max_matches_trace() {
        let m = model();
        let seq = vec![3u32, 1, 4, 1, 5];
        let p = profile_neurons(&m, &ProbeCorpus::new(vec![seq.clone()], "one").unwrap(), Aggregation::Max, false)
            .unwrap();
        let (_, trace) = m.forward(&seq, true).unwrap();
        let act = &trace.unwrap().activations[0];
        for j in 0..act.cols() {
            let want = (0..act.rows()).map(|r| act.row(r)[j].abs()).fold(0.0f32, f32::max);
            assert_eq!(p.scores[0][j], want);
        }
        assert_eq!(p.token_count, 5);
    }

    #[test]
    fn profiling_does_not_mutate() {
        let m = model();
        let before = m.parameter_hash();
        profile_neurons(&m, &probe(), Aggregation::Mean, true).unwrap();
        profile_layers(&m, &probe(), Aggregation::Max, true).unwrap();
        assert_eq!(m.parameter_hash(), before);
    }

    #[test]
    fn identity_layer_scores_zero() {
        let mut m = model();
        let d = m.config.d_model;
        let w = m.layers[0].ffn.width();
        m.layers[0].wo = Tensor::zeros(&[d, d]);
        m.layers[0].ffn.down = Tensor::zeros(&[w, d]);
        for normalized in [false, true] {
            let imp = profile_layers(&m, &probe(), Aggregation::Max, normalized).unwrap();
            assert_eq!(imp.scores[0], 0.0);
            assert!(imp.scores[1] > 0.0);
        }
    }

    #[test]
    fn merge_rules() {
        let m = model();
        let seqs = probe().sequences().to_vec();
        let a = ProbeCorpus::new(seqs[..1].to_vec(), "a").unwrap();
        let b = ProbeCorpus::new(seqs[1..].to_vec(), "b").unwrap();
        let whole = profile_neurons(&m, &probe(), Aggregation::Max, true).unwrap();
        let pa = profile_neurons(&m, &a, Aggregation::Max, true).unwrap();
        let pb = profile_neurons(&m, &b, Aggregation::Max, true).unwrap();
        assert_eq!(merge_profiles(std::slice::from_ref(&pa)).unwrap(), pa);
        assert_eq!(merge_profiles(&[pa.clone(), pb]).unwrap(), whole);
        let mean = profile_neurons(&m, &a, Aggregation::Mean, true).unwrap();
        assert!(matches!(merge_profiles(&[pa, mean]), Err(Error::ProfileMismatch(_))));
        let q = profile_neurons(&m, &a, Aggregation::Quantile(0.5), true).unwrap();
        assert!(merge_profiles(&[q.clone(), q]).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&mut [3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&mut [0.0, 1.0], 0.25), 0.25);
        assert_eq!(quantile(&mut [4.0], 0.99), 4.0);
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let m = model();
        let p = profile_neurons(&m, &probe(), Aggregation::Quantile(0.99), true).unwrap();
        let back = ActivationProfile::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        let imp = profile_layers(&m, &probe(), Aggregation::Mean, false).unwrap();
        assert_eq!(LayerImportance::from_text(&imp.to_text()).unwrap(), imp);
        assert!(ActivationProfile::from_text("garbage").is_err());
    }
}
