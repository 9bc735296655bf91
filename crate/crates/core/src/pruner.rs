//! Selection of redundant neurons and layers from profiles, and the
//! structural surgery that removes them.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::info;

use crate::error::{Error, Result};
use crate::metrics::{count_flops, count_params};
use crate::model::TransformerModel;
use crate::profiler::{ActivationProfile, LayerImportance, ProbeCorpus};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NeuronRule {
    /// Every neuron scoring at most σ.
    Threshold(f32),
    /// The `k` lowest-scoring neurons of every layer.
    Count(usize),
    /// Per layer, the lowest-scoring neurons so that `floor(w·(1−p))` remain.
    Fraction(f32),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerRule {
    /// Every unprotected layer scoring at most σ.
    Threshold(f32),
    /// The `m` lowest-scoring unprotected layers.
    Count(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneCriterion {
    pub neuron: NeuronRule,
    pub layer: LayerRule,
    pub protected_layers: BTreeSet<usize>,
}

impl Default for PruneCriterion {
    fn default() -> Self {
        Self {
            neuron: NeuronRule::Fraction(0.1),
            layer: LayerRule::Count(0),
            protected_layers: BTreeSet::from([0]),
        }
    }
}

impl PruneCriterion {
    /// Removes nothing.
    pub fn empty() -> Self {
        Self {
            neuron: NeuronRule::Count(0),
            layer: LayerRule::Count(0),
            protected_layers: BTreeSet::from([0]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidCriterion(m));
        match self.neuron {
            NeuronRule::Threshold(s) | NeuronRule::Fraction(s) if !s.is_finite() => {
                return bad(format!("non-finite neuron rule {:?}", self.neuron));
            }
            NeuronRule::Fraction(p) if !(0.0..1.0).contains(&p) => {
                return bad(format!("neuron fraction {p} outside [0, 1)"));
            }
            _ => {}
        }
        if let LayerRule::Threshold(s) = self.layer {
            if !s.is_finite() {
                return bad(format!("non-finite layer threshold {s}"));
            }
        }
        Ok(())
    }
}

/// Neurons left in a layer of width `width` after one fraction step:
/// `floor(width·(1−p))`. The slack absorbs the f32 rounding of `p`, so
/// `p = 0.1` keeps 207 of 230.
pub fn kept_width(width: usize, fraction: f32) -> usize {
    (width as f64 * (1.0 - fraction as f64) + 1e-4).floor() as usize
}

/// Neurons `(layer, index)` and whole layers selected for removal. Indices
/// refer to the model the set was computed against.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RedundancySet {
    pub neurons: BTreeSet<(usize, usize)>,
    pub layers: BTreeSet<usize>,
}

impl RedundancySet {
    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty() && self.layers.is_empty()
    }

    /// Union of both sets, dropping neurons that lie in removed layers.
    pub fn union(&self, other: &RedundancySet) -> RedundancySet {
        let layers: BTreeSet<usize> = self.layers.union(&other.layers).copied().collect();
        let all: BTreeSet<(usize, usize)> = self.neurons.union(&other.neurons).copied().collect();
        let neurons: BTreeSet<(usize, usize)> = all.iter().filter(|(l, _)| !layers.contains(l)).copied().collect();
        if neurons.len() != all.len() {
            info!(
                "dropping {} neuron entries inside removed layers",
                all.len() - neurons.len()
            );
        }
        RedundancySet { neurons, layers }
    }

    /// Neurons removed from each of `n_layers` layers.
    pub fn neurons_per_layer(&self, n_layers: usize) -> Vec<usize> {
        let mut out = vec![0; n_layers];
        for &(l, _) in &self.neurons {
            if l < n_layers {
                out[l] += 1;
            }
        }
        out
    }

    /// One line per entry, `L ℓ` or `N ℓ j`, ordered by layer then neuron.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut layers: BTreeSet<usize> = self.layers.clone();
        layers.extend(self.neurons.iter().map(|&(l, _)| l));
        for l in layers {
            if self.layers.contains(&l) {
                writeln!(s, "L {l}").unwrap();
            }
            for &(_, j) in self.neurons.range((l, 0)..=(l, usize::MAX)) {
                writeln!(s, "N {l} {j}").unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut out = RedundancySet::default();
        for (i, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("line {}: bad index `{s}`", i + 1)))
            };
            match parts.as_slice() {
                [] => {}
                ["L", l] => {
                    out.layers.insert(num(l)?);
                }
                ["N", l, j] => {
                    out.neurons.insert((num(l)?, num(j)?));
                }
                _ => return Err(Error::Parse(format!("line {}: `{line}`", i + 1))),
            }
        }
        Ok(out)
    }
}

fn ascending_by_score(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

pub fn extract_redundant_neurons(profile: &ActivationProfile, crit: &PruneCriterion) -> Result<RedundancySet> {
    crit.validate()?;
    let mut neurons = BTreeSet::new();
    for (l, scores) in profile.scores.iter().enumerate() {
        let w = scores.len();
        let k = match crit.neuron {
            NeuronRule::Threshold(sigma) => {
                let picked: Vec<usize> = (0..w).filter(|&j| scores[j] <= sigma).collect();
                if picked.len() >= w {
                    return Err(Error::InvalidCriterion(format!(
                        "threshold {sigma} would remove every neuron of layer {l}"
                    )));
                }
                neurons.extend(picked.into_iter().map(|j| (l, j)));
                continue;
            }
            NeuronRule::Count(k) => k,
            NeuronRule::Fraction(p) => w - kept_width(w, p),
        };
        if k >= w {
            return Err(Error::InvalidCriterion(format!(
                "removing {k} of {w} neurons would empty layer {l}"
            )));
        }
        neurons.extend(ascending_by_score(scores).into_iter().take(k).map(|j| (l, j)));
    }
    Ok(RedundancySet {
        neurons,
        layers: BTreeSet::new(),
    })
}

pub fn extract_redundant_layers(importance: &LayerImportance, crit: &PruneCriterion) -> Result<RedundancySet> {
    crit.validate()?;
    let depth = importance.scores.len();
    let candidates: Vec<usize> = (0..depth).filter(|l| !crit.protected_layers.contains(l)).collect();
    let layers: BTreeSet<usize> = match crit.layer {
        LayerRule::Threshold(sigma) => candidates
            .into_iter()
            .filter(|&l| importance.scores[l] <= sigma)
            .collect(),
        LayerRule::Count(m) => {
            if m > candidates.len() {
                return Err(Error::InvalidCriterion(format!(
                    "cannot remove {m} layers: only {} unprotected",
                    candidates.len()
                )));
            }
            let mut order = candidates;
            order.sort_by(|&a, &b| importance.scores[a].total_cmp(&importance.scores[b]).then(b.cmp(&a)));
            order.into_iter().take(m).collect()
        }
    };
    if depth > 0 && layers.len() == depth {
        return Err(Error::InvalidCriterion("criterion would remove every layer".into()));
    }
    Ok(RedundancySet {
        neurons: BTreeSet::new(),
        layers,
    })
}

fn keep_columns(t: &Tensor, keep: &[usize]) -> Tensor {
    let cols = t.cols();
    let data = t
        .data()
        .chunks(cols)
        .flat_map(|row| keep.iter().map(move |&j| row[j]))
        .collect();
    Tensor::matrix(t.rows(), keep.len(), data).expect("surviving entries are finite")
}

fn keep_rows(t: &Tensor, keep: &[usize]) -> Tensor {
    let data = keep.iter().flat_map(|&j| t.row(j).iter().copied()).collect();
    Tensor::matrix(keep.len(), t.cols(), data).expect("surviving entries are finite")
}

/// Removes the selected neurons, then the selected layers. Surviving
/// weights are copied bit for bit.
pub fn apply_prune(model: &TransformerModel, r: &RedundancySet) -> Result<TransformerModel> {
    let depth = model.n_layers();
    if let Some(&l) = r.layers.iter().find(|&&l| l >= depth) {
        return Err(Error::StaleRedundancySet(format!("layer {l} out of range for depth {depth}")));
    }
    for &(l, j) in &r.neurons {
        if l >= depth || j >= model.layers[l].ffn.width() {
            return Err(Error::StaleRedundancySet(format!("neuron ({l}, {j}) out of range")));
        }
    }
    let mut out = model.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        if r.layers.contains(&l) {
            continue;
        }
        let removed: BTreeSet<usize> = r.neurons.range((l, 0)..=(l, usize::MAX)).map(|&(_, j)| j).collect();
        if removed.is_empty() {
            continue;
        }
        let w = layer.ffn.width();
        if removed.len() == w {
            return Err(Error::StaleRedundancySet(format!("set would empty layer {l}")));
        }
        let keep: Vec<usize> = (0..w).filter(|j| !removed.contains(j)).collect();
        layer.ffn.gate = keep_columns(&layer.ffn.gate, &keep);
        layer.ffn.up = keep_columns(&layer.ffn.up, &keep);
        layer.ffn.down = keep_rows(&layer.ffn.down, &keep);
        out.config.ffn_widths[l] = keep.len();
    }
    let mut l = 0;
    out.layers.retain(|_| {
        l += 1;
        !r.layers.contains(&(l - 1))
    });
    out.config.ffn_widths = (0..depth)
        .filter(|l| !r.layers.contains(l))
        .map(|l| out.config.ffn_widths[l])
        .collect();
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurgeryReport {
    /// Largest absolute logit change over every probe position.
    pub max_logit_delta: f32,
    pub params_removed: usize,
    /// FLOPs removed for one forward pass over the longest probe sequence.
    pub flops_removed: u64,
    /// Set when `max_logit_delta` exceeds the alarm bound.
    pub alarm: bool,
}

/// Compares a model before and after surgery on the probe corpus.
pub fn verify_surgery(
    before: &TransformerModel,
    after: &TransformerModel,
    probe: &ProbeCorpus,
    alarm_bound: f32,
) -> Result<SurgeryReport> {
    let mut delta = 0.0f32;
    let mut longest = 1;
    for seq in probe.sequences() {
        let seq = &seq[..seq.len().min(before.config.max_seq_len)];
        longest = longest.max(seq.len());
        let (a, _) = before.forward(seq, false)?;
        let (b, _) = after.forward(seq, false)?;
        delta = delta.max(a.max_abs_diff(&b));
    }
    Ok(SurgeryReport {
        max_logit_delta: delta,
        params_removed: count_params(before) - count_params(after),
        flops_removed: count_flops(before, longest) - count_flops(after, longest),
        alarm: delta > alarm_bound,
    })
}
