//! The prune–tune loop: per round, profile on a probe shard, select
//! redundant neurons or layers, excise them, and recover with tuning.
//! Also the one-shot baseline, schedule planning, and history output.

use std::fmt::Write as _;
use std::time::Instant;

use log::info;

use crate::error::{Error, Result};
use crate::metrics::{count_flops, count_params, eval_accuracy};
use crate::model::{ModelConfig, TransformerModel};
use crate::profiler::{profile_layers, profile_neurons, Aggregation, ProbeCorpus};
use crate::pruner::{
    apply_prune, extract_redundant_layers, extract_redundant_neurons, kept_width, LayerRule, NeuronRule,
    PruneCriterion, RedundancySet,
};
use crate::tuner::{continual_pretrain, rl_recover, Corpus, RewardSpec, RlTaskSet, TrainConfig};
use crate::toydata::ToyData;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneOrder {
    NeuronsThenLayers,
    LayersThenNeurons,
    /// Odd rounds neurons, even rounds layers, until the layer rounds run out.
    Alternating,
}

impl PruneOrder {
    pub fn tag(self) -> &'static str {
        match self {
            PruneOrder::NeuronsThenLayers => "neurons-then-layers",
            PruneOrder::LayersThenNeurons => "layers-then-neurons",
            PruneOrder::Alternating => "alternating",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "neurons-then-layers" => Ok(PruneOrder::NeuronsThenLayers),
            "layers-then-neurons" => Ok(PruneOrder::LayersThenNeurons),
            "alternating" => Ok(PruneOrder::Alternating),
            _ => Err(Error::Parse(format!("unknown pruning order `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecoveryKind {
    Continual,
    Rl,
    /// Continual pre-training followed by RL.
    Both,
}

impl RecoveryKind {
    pub fn tag(self) -> &'static str {
        match self {
            RecoveryKind::Continual => "continual",
            RecoveryKind::Rl => "rl",
            RecoveryKind::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "continual" => Ok(RecoveryKind::Continual),
            "rl" => Ok(RecoveryKind::Rl),
            "both" => Ok(RecoveryKind::Both),
            _ => Err(Error::Parse(format!("unknown recovery kind `{s}`"))),
        }
    }
}

/// What a round removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundKind {
    Neurons,
    Layers,
    /// Neurons and layers selected from the same profile (one-shot baseline).
    Both,
}

impl RoundKind {
    pub fn tag(self) -> &'static str {
        match self {
            RoundKind::Neurons => "neurons",
            RoundKind::Layers => "layers",
            RoundKind::Both => "both",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "neurons" => Ok(RoundKind::Neurons),
            "layers" => Ok(RoundKind::Layers),
            "both" => Ok(RoundKind::Both),
            _ => Err(Error::Parse(format!("unknown round kind `{s}`"))),
        }
    }
}

/// Which sequences are profiled in a round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeSource {
    /// The shard recovery trains on in that round.
    CurrentShard,
    Shard(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileSettings {
    pub neuron_mode: Aggregation,
    pub weight_by_down_row: bool,
    pub layer_mode: Aggregation,
    pub normalized: bool,
    pub probe: ProbeSource,
    /// Profile at most this many sequences of the probe shard.
    pub probe_limit: Option<usize>,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self {
            neuron_mode: Aggregation::Max,
            weight_by_down_row: true,
            layer_mode: Aggregation::Max,
            normalized: true,
            probe: ProbeSource::CurrentShard,
            probe_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopConfig {
    /// Maximum number of rounds.
    pub rounds: usize,
    pub order: PruneOrder,
    /// How many rounds remove layers; the rest remove neurons.
    pub layer_rounds: usize,
    /// Stop after the surgery that reaches this parameter count.
    pub target_params: Option<usize>,
    /// Shrink the last neuron step so it lands on the target instead of
    /// overshooting it.
    pub clip_to_target: bool,
    pub recovery: RecoveryKind,
    /// Continual pre-training per round; `steps` is the round budget.
    pub pretrain: TrainConfig,
    /// RL per round; `steps` is the number of updates.
    pub rl: TrainConfig,
    pub reward: RewardSpec,
    pub profile: ProfileSettings,
    /// Sequence length at which FLOPs are reported.
    pub flops_seq_len: usize,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            rounds: 4,
            order: PruneOrder::NeuronsThenLayers,
            layer_rounds: 0,
            target_params: None,
            clip_to_target: false,
            recovery: RecoveryKind::Continual,
            pretrain: TrainConfig::default(),
            rl: TrainConfig {
                steps: 50,
                batch_size: 8,
                lr: 1e-5,
                max_len: 24,
                ..TrainConfig::default()
            },
            reward: RewardSpec::default(),
            profile: ProfileSettings::default(),
            flops_seq_len: 16,
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("the loop needs at least one round".into()));
        }
        if self.layer_rounds > self.rounds {
            return Err(Error::InvalidConfig(format!(
                "{} layer rounds exceed {} rounds",
                self.layer_rounds, self.rounds
            )));
        }
        if self.order == PruneOrder::Alternating && 2 * self.layer_rounds > self.rounds {
            return Err(Error::InvalidConfig(format!(
                "alternating order fits at most {} layer rounds in {} rounds",
                self.rounds / 2,
                self.rounds
            )));
        }
        if self.flops_seq_len == 0 {
            return Err(Error::InvalidConfig("flops_seq_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Round kinds in execution order.
    pub fn schedule(&self) -> Vec<RoundKind> {
        let (t, m) = (self.rounds, self.layer_rounds);
        match self.order {
            PruneOrder::NeuronsThenLayers => (0..t)
                .map(|r| if r >= t - m { RoundKind::Layers } else { RoundKind::Neurons })
                .collect(),
            PruneOrder::LayersThenNeurons => (0..t)
                .map(|r| if r < m { RoundKind::Layers } else { RoundKind::Neurons })
                .collect(),
            PruneOrder::Alternating => (0..t)
                .map(|r| if r % 2 == 1 && r / 2 < m { RoundKind::Layers } else { RoundKind::Neurons })
                .collect(),
        }
    }
}

/// The sequences loop rounds and evaluation draw from.
#[derive(Clone, Debug)]
pub struct LoopData {
    pub corpus: Corpus,
    pub rl_tasks: RlTaskSet,
    pub benchmark: RlTaskSet,
}

impl From<ToyData> for LoopData {
    fn from(d: ToyData) -> Self {
        Self {
            corpus: d.corpus,
            rl_tasks: d.rl_tasks,
            benchmark: d.benchmark,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub round: usize,
    pub kind: RoundKind,
    pub shard: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    /// Neurons removed per layer, indexed by pre-surgery layer.
    pub neurons_removed: Vec<usize>,
    /// Pre-surgery indices of removed layers.
    pub layers_removed: Vec<usize>,
    pub widths_after: Vec<usize>,
    pub post_prune_accuracy: f32,
    pub post_recovery_accuracy: f32,
    pub recovery_steps: usize,
    /// Mean of the last ten recorded recovery losses (continual) or rewards (RL).
    pub recovery_metric: f32,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct LoopHistory {
    pub records: Vec<IterationRecord>,
    pub final_model: TransformerModel,
    pub config: LoopConfig,
    pub base_params: usize,
    pub base_flops: u64,
    pub base_accuracy: f32,
}

/// A failed round, with the history of the rounds before it.
#[derive(Debug)]
pub struct LoopFailure {
    pub history: LoopHistory,
    pub error: Error,
}

fn tail_mean(v: &[f32]) -> f32 {
    let tail = &v[v.len().saturating_sub(10)..];
    if tail.is_empty() {
        return 0.0;
    }
    (tail.iter().map(|&x| x as f64).sum::<f64>() / tail.len() as f64) as f32
}

/// Probe sequences for a round that trains on `shard`.
pub fn probe_for(data: &LoopData, cfg: &LoopConfig, shard: usize) -> Result<ProbeCorpus> {
    let index = match cfg.profile.probe {
        ProbeSource::CurrentShard => shard,
        ProbeSource::Shard(s) => s,
    };
    let seqs = data.corpus.shard(index)?;
    let n = cfg.profile.probe_limit.map_or(seqs.len(), |l| l.min(seqs.len()));
    ProbeCorpus::new(seqs[..n].to_vec(), format!("shard {index}"))
}

/// Neurons per layer removed by one neuron step, after target clipping.
fn neuron_step(
    widths: &[usize],
    rule: NeuronRule,
    d_model: usize,
    params: usize,
    cfg: &LoopConfig,
) -> Option<usize> {
    let k = match rule {
        NeuronRule::Threshold(_) => return None,
        NeuronRule::Count(k) => k,
        NeuronRule::Fraction(p) => widths.first().map_or(0, |&w| w - kept_width(w, p)),
    };
    match cfg.target_params {
        Some(target) if cfg.clip_to_target && !widths.is_empty() => {
            let per = 3 * d_model * widths.len();
            let needed = params.saturating_sub(target).div_ceil(per);
            Some(k.min(needed))
        }
        _ => Some(k),
    }
}

/// Redundancy set for one surgery of the given kind.
pub fn select(
    model: &TransformerModel,
    kind: RoundKind,
    crit: &PruneCriterion,
    probe: &ProbeCorpus,
    cfg: &LoopConfig,
) -> Result<RedundancySet> {
    let mut r = RedundancySet::default();
    if matches!(kind, RoundKind::Neurons | RoundKind::Both) {
        let profile = profile_neurons(model, probe, cfg.profile.neuron_mode, cfg.profile.weight_by_down_row)?;
        let params = count_params(model);
        let rule = match neuron_step(&model.config.ffn_widths, crit.neuron, model.config.d_model, params, cfg) {
            Some(k) if kind == RoundKind::Neurons => NeuronRule::Count(k),
            _ => crit.neuron,
        };
        let c = PruneCriterion {
            neuron: rule,
            ..crit.clone()
        };
        r = r.union(&extract_redundant_neurons(&profile, &c)?);
    }
    if matches!(kind, RoundKind::Layers | RoundKind::Both) {
        let imp = profile_layers(model, probe, cfg.profile.layer_mode, cfg.profile.normalized)?;
        r = r.union(&extract_redundant_layers(&imp, crit)?);
    }
    Ok(r)
}

/// Runs the recovery configured for round `round` on shard `shard`.
/// Returns the tuned model, the steps taken, and the summary metric.
fn recover(
    model: &TransformerModel,
    data: &LoopData,
    cfg: &LoopConfig,
    round: usize,
    shard: usize,
) -> Result<(TransformerModel, usize, f32)> {
    let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(round as u64);
    let mut m = model.clone();
    let mut steps = 0;
    let mut metric = 0.0;
    if matches!(cfg.recovery, RecoveryKind::Continual | RecoveryKind::Both) {
        let tc = TrainConfig {
            shard,
            seed,
            ..cfg.pretrain.clone()
        };
        let (next, curve) = continual_pretrain(&m, &data.corpus, &tc)?;
        m = next;
        steps += tc.steps;
        metric = tail_mean(&curve);
    }
    if matches!(cfg.recovery, RecoveryKind::Rl | RecoveryKind::Both) {
        let tc = TrainConfig {
            seed: seed ^ 0x5eed,
            ..cfg.rl.clone()
        };
        let (next, curve) = rl_recover(&m, &data.rl_tasks, &cfg.reward, &tc)?;
        m = next;
        steps += tc.steps;
        metric = tail_mean(&curve);
    }
    Ok((m, steps, metric))
}

fn prune_round(
    model: &TransformerModel,
    data: &LoopData,
    crit: &PruneCriterion,
    cfg: &LoopConfig,
    round: usize,
    kind: RoundKind,
    probe_shard: usize,
    recovery_shards: &[usize],
) -> Result<(TransformerModel, IterationRecord)> {
    let start = Instant::now();
    let probe = probe_for(data, cfg, probe_shard)?;
    let r = select(model, kind, crit, &probe, cfg)?;
    let pruned = apply_prune(model, &r)?;
    let post_prune_accuracy = eval_accuracy(&pruned, &data.benchmark)?;
    let mut recovered = pruned.clone();
    let mut recovery_steps = 0;
    let mut recovery_metric = 0.0;
    for (i, &shard) in recovery_shards.iter().enumerate() {
        let (m, steps, metric) = recover(&recovered, data, cfg, round + i, shard)?;
        recovered = m;
        recovery_steps += steps;
        recovery_metric = metric;
    }
    let post_recovery_accuracy = eval_accuracy(&recovered, &data.benchmark)?;
    let record = IterationRecord {
        round,
        kind,
        shard: probe_shard,
        params_before: count_params(model),
        params_after: count_params(&pruned),
        flops_before: count_flops(model, cfg.flops_seq_len),
        flops_after: count_flops(&pruned, cfg.flops_seq_len),
        neurons_removed: r.neurons_per_layer(model.n_layers()),
        layers_removed: r.layers.iter().copied().collect(),
        widths_after: pruned.config.ffn_widths.clone(),
        post_prune_accuracy,
        post_recovery_accuracy,
        recovery_steps,
        recovery_metric,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    info!(
        "round {round} ({}): params {} -> {}, accuracy {:.3} -> {:.3}",
        kind.tag(),
        record.params_before,
        record.params_after,
        post_prune_accuracy,
        post_recovery_accuracy
    );
    Ok((recovered, record))
}

fn start_history(model: &TransformerModel, data: &LoopData, cfg: &LoopConfig) -> Result<LoopHistory> {
    cfg.validate()?;
    Ok(LoopHistory {
        records: Vec::new(),
        final_model: model.clone(),
        config: cfg.clone(),
        base_params: count_params(model),
        base_flops: count_flops(model, cfg.flops_seq_len),
        base_accuracy: eval_accuracy(model, &data.benchmark)?,
    })
}

fn fail(history: LoopHistory, round: usize, error: Error) -> Box<LoopFailure> {
    Box::new(LoopFailure {
        history,
        error: Error::RoundFailed {
            round,
            source: Box::new(error),
        },
    })
}

/// Iterates profile → extract → prune → recover. Round `t` probes and
/// trains on shard `t mod K`.
pub fn run_loop(
    model: &TransformerModel,
    data: &LoopData,
    crit: &PruneCriterion,
    cfg: &LoopConfig,
) -> std::result::Result<LoopHistory, Box<LoopFailure>> {
    let mut history = start_history(model, data, cfg).map_err(|e| fail_early(model, cfg, e))?;
    if let Some(target) = cfg.target_params {
        if target >= history.base_params {
            let e = Error::InvalidConfig(format!(
                "target {target} is not below the current {} parameters",
                history.base_params
            ));
            return Err(Box::new(LoopFailure { history, error: e }));
        }
    }
    for (round, kind) in cfg.schedule().into_iter().enumerate() {
        let shard = data.corpus.shard_for_round(round);
        let current = history.final_model.clone();
        match prune_round(&current, data, crit, cfg, round, kind, shard, &[shard]) {
            Ok((m, rec)) => {
                let reached = cfg.target_params.is_some_and(|t| rec.params_after <= t);
                history.final_model = m;
                history.records.push(rec);
                if reached {
                    break;
                }
            }
            Err(e) => return Err(fail(history, round, e)),
        }
    }
    Ok(history)
}

fn fail_early(model: &TransformerModel, cfg: &LoopConfig, error: Error) -> Box<LoopFailure> {
    Box::new(LoopFailure {
        history: LoopHistory {
            records: Vec::new(),
            final_model: model.clone(),
            config: cfg.clone(),
            base_params: count_params(model),
            base_flops: count_flops(model, cfg.flops_seq_len.max(1)),
            base_accuracy: 0.0,
        },
        error,
    })
}

/// Removes everything in one surgery using `crit` (neurons and layers
/// selected from the same profile of shard 0), then spends the recovery
/// budget of `cfg.rounds` rounds in one phase, visiting shards in the same
/// order as [`run_loop`].
pub fn prune_once_baseline(
    model: &TransformerModel,
    data: &LoopData,
    crit: &PruneCriterion,
    cfg: &LoopConfig,
) -> std::result::Result<LoopHistory, Box<LoopFailure>> {
    let mut history = start_history(model, data, cfg).map_err(|e| fail_early(model, cfg, e))?;
    let shards: Vec<usize> = (0..cfg.rounds).map(|t| data.corpus.shard_for_round(t)).collect();
    let once = LoopConfig {
        clip_to_target: false,
        ..cfg.clone()
    };
    match prune_round(model, data, crit, &once, 0, RoundKind::Both, shards[0], &shards) {
        Ok((m, rec)) => {
            history.final_model = m;
            history.records.push(rec);
            Ok(history)
        }
        Err(e) => Err(fail(history, 0, e)),
    }
}

/// Architecture after one planned round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedRound {
    pub round: usize,
    pub kind: RoundKind,
    pub widths: Vec<usize>,
    pub params: usize,
}

fn params_of(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let blocks: usize = config.ffn_widths.iter().map(|&f| config.block_params(f)).sum();
    2 * config.vocab_size * d + d + blocks
}

/// Predicts the architecture after every round from counts alone. Requires
/// count or fraction rules and uniform widths; layer rounds drop the
/// deepest widths, which is exact when widths are uniform.
pub fn plan_schedule(config: &ModelConfig, crit: &PruneCriterion, cfg: &LoopConfig) -> Result<Vec<PlannedRound>> {
    cfg.validate()?;
    let mut widths = config.ffn_widths.clone();
    let mut out = Vec::new();
    for (round, kind) in cfg.schedule().into_iter().enumerate() {
        let mut c = config.clone();
        c.ffn_widths = widths.clone();
        let params = params_of(&c);
        match kind {
            RoundKind::Neurons | RoundKind::Both => {
                let k = neuron_step(&widths, crit.neuron, config.d_model, params, cfg).ok_or_else(|| {
                    Error::InvalidCriterion("threshold rules cannot be planned without scores".into())
                })?;
                if widths.iter().any(|&w| k >= w) {
                    return Err(Error::InvalidCriterion(format!("step of {k} neurons would empty a layer")));
                }
                widths.iter_mut().for_each(|w| *w -= k);
            }
            RoundKind::Layers => {}
        }
        if matches!(kind, RoundKind::Layers | RoundKind::Both) {
            let m = match crit.layer {
                LayerRule::Count(m) => m,
                LayerRule::Threshold(_) => {
                    return Err(Error::InvalidCriterion(
                        "threshold rules cannot be planned without scores".into(),
                    ))
                }
            };
            let unprotected = (0..widths.len()).filter(|l| !crit.protected_layers.contains(l)).count();
            if m > unprotected || (m > 0 && m >= widths.len()) {
                return Err(Error::InvalidCriterion(format!("cannot remove {m} more layers")));
            }
            widths.truncate(widths.len() - m);
        }
        c.ffn_widths = widths.clone();
        let params = params_of(&c);
        out.push(PlannedRound {
            round,
            kind,
            widths: widths.clone(),
            params,
        });
        if cfg.target_params.is_some_and(|t| params <= t) {
            break;
        }
    }
    Ok(out)
}

/// A one-shot criterion that reaches the same architecture as `plan`.
pub fn one_shot_criterion(config: &ModelConfig, plan: &[PlannedRound], protected: &PruneCriterion) -> PruneCriterion {
    let last = plan.last();
    let final_width = last.and_then(|p| p.widths.first().copied()).unwrap_or(config.ffn_widths[0]);
    let depth = last.map_or(config.n_layers(), |p| p.widths.len());
    PruneCriterion {
        neuron: NeuronRule::Count(config.ffn_widths[0] - final_width),
        layer: LayerRule::Count(config.n_layers() - depth),
        protected_layers: protected.protected_layers.clone(),
    }
}

const CSV_HEADER: &str = "round,kind,shard,params_before,params_after,flops_before,flops_after,\
neurons_removed,layers_removed,widths_after,post_prune_accuracy,post_recovery_accuracy,\
recovery_steps,recovery_metric";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn split<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| x.parse().map_err(|_| Error::Parse(format!("bad list entry `{x}`"))))
        .collect()
}

/// One row per round. Contains no wall-clock values, so identical runs give
/// identical files.
pub fn history_csv(records: &[IterationRecord]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.kind.tag(),
            r.shard,
            r.params_before,
            r.params_after,
            r.flops_before,
            r.flops_after,
            join(&r.neurons_removed),
            join(&r.layers_removed),
            join(&r.widths_after),
            r.post_prune_accuracy,
            r.post_recovery_accuracy,
            r.recovery_steps,
            r.recovery_metric
        )
        .unwrap();
    }
    s
}

pub fn parse_history_csv(text: &str) -> Result<Vec<IterationRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse("unexpected history CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 14 {
                return Err(Error::Parse(format!("expected 14 fields in `{line}`")));
            }
            let num = |i: usize| f[i].parse::<u64>().map_err(|_| Error::Parse(format!("bad number `{}`", f[i])));
            let real = |i: usize| f[i].parse::<f32>().map_err(|_| Error::Parse(format!("bad number `{}`", f[i])));
            Ok(IterationRecord {
                round: num(0)? as usize,
                kind: RoundKind::parse(f[1])?,
                shard: num(2)? as usize,
                params_before: num(3)? as usize,
                params_after: num(4)? as usize,
                flops_before: num(5)?,
                flops_after: num(6)?,
                neurons_removed: split(f[7])?,
                layers_removed: split(f[8])?,
                widths_after: split(f[9])?,
                post_prune_accuracy: real(10)?,
                post_recovery_accuracy: real(11)?,
                recovery_steps: num(12)? as usize,
                recovery_metric: real(13)?,
                wall_seconds: 0.0,
            })
        })
        .collect()
}

/// `round,wall_seconds` for every round.
pub fn timing_csv(records: &[IterationRecord]) -> String {
    let mut s = String::from("round,wall_seconds\n");
    for r in records {
        writeln!(s, "{},{:.3}", r.round, r.wall_seconds).unwrap();
    }
    s
}

/// Accuracy after each surgery and each recovery: `round,stage,accuracy`,
/// with round 0 holding the unpruned model.
pub fn accuracy_curve(base_accuracy: f32, records: &[IterationRecord]) -> String {
    let mut s = format!("round,stage,accuracy\n0,base,{base_accuracy}\n");
    for r in records {
        writeln!(s, "{},pruned,{}", r.round + 1, r.post_prune_accuracy).unwrap();
        writeln!(s, "{},recovered,{}", r.round + 1, r.post_recovery_accuracy).unwrap();
    }
    s
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub params: usize,
    pub accuracy: f32,
    pub flops: u64,
    pub speedup: Option<f64>,
    pub recovery_steps: usize,
}

impl ReportRow {
    pub fn from_history(label: &str, base_accuracy: f32, base_params: usize, base_flops: u64, records: &[IterationRecord]) -> Self {
        match records.last() {
            Some(last) => Self {
                label: label.into(),
                params: last.params_after,
                accuracy: last.post_recovery_accuracy,
                flops: last.flops_after,
                speedup: None,
                recovery_steps: records.iter().map(|r| r.recovery_steps).sum(),
            },
            None => Self {
                label: label.into(),
                params: base_params,
                accuracy: base_accuracy,
                flops: base_flops,
                speedup: None,
                recovery_steps: 0,
            },
        }
    }
}

fn human(n: u64) -> String {
    match n {
        n if n >= 1_000_000_000 => format!("{:.2} G", n as f64 / 1e9),
        n if n >= 1_000_000 => format!("{:.2} M", n as f64 / 1e6),
        n if n >= 1_000 => format!("{:.1} K", n as f64 / 1e3),
        n => n.to_string(),
    }
}

/// Markdown table with columns Model, #Params, Accu., #FLOPs, Speedup, and
/// Recovery (optimizer steps).
pub fn markdown_report(rows: &[ReportRow]) -> String {
    let mut s = String::from("| Model | #Params | Accu. | #FLOPs | Speedup | Recovery |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let speed = r.speedup.map_or("-".to_string(), |v| format!("{v:.2}x"));
        let rec = if r.recovery_steps == 0 { "-".to_string() } else { format!("{} steps", r.recovery_steps) };
        writeln!(
            s,
            "| {} | {} | {:.1} | {} | {} | {} |",
            r.label,
            human(r.params as u64),
            100.0 * r.accuracy,
            human(r.flops),
            speed,
            rec
        )
        .unwrap();
    }
    s
}
