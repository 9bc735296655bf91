//! Line-oriented configuration: `[section]` headers, `key = value` lines,
//! `#` comments. [`RunConfig`] maps a file onto every tunable of a run.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::profiler::Aggregation;
use crate::prune_loop::{LoopConfig, ProbeSource, ProfileSettings, PruneOrder, RecoveryKind};
use crate::pruner::{LayerRule, NeuronRule, PruneCriterion};
use crate::toydata::{ToyTaskSpec, VOCAB_SIZE};
use crate::tuner::TrainConfig;

/// Raw `section.key → value` pairs in file order per section.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`, found `{raw}`", i + 1)))?;
            if section.is_empty() {
                return Err(Error::Parse(format!("line {}: key outside any section", i + 1)));
            }
            let key = format!("{section}.{}", k.trim());
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    /// Sets `section.key`, as a command-line override does.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Canonical text: sections and keys sorted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut current = "";
        for (key, value) in &self.entries {
            let (section, k) = key.split_once('.').expect("keys carry a section");
            if section != current {
                if !current.is_empty() {
                    s.push('\n');
                }
                writeln!(s, "[{section}]").unwrap();
                current = section;
            }
            writeln!(s, "{k} = {value}").unwrap();
        }
        s
    }
}

/// Every setting of a run, with defaults for keys the file omits.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: ToyTaskSpec,
    pub model: ModelConfig,
    pub model_seed: u64,
    /// Training of the base model.
    pub train: TrainConfig,
    /// Base training restarts the optimizer every this many steps (0: never).
    pub train_segment: usize,
    pub criterion: PruneCriterion,
    pub looping: LoopConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: ToyTaskSpec::default(),
            model: ModelConfig::uniform(VOCAB_SIZE, 64, 4, 32, 4, 256),
            model_seed: 0,
            train: TrainConfig {
                steps: 4000,
                lr: 1e-3,
                max_len: 32,
                ..TrainConfig::default()
            },
            train_segment: 500,
            criterion: PruneCriterion::default(),
            looping: LoopConfig::default(),
        }
    }
}

struct Reader<'a> {
    file: &'a ConfigFile,
    used: BTreeSet<String>,
}

impl Reader<'_> {
    fn raw(&mut self, key: &str) -> Option<&str> {
        self.used.insert(key.to_string());
        self.file.get(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.raw(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::Parse(format!("`{key}`: cannot parse `{v}`")))?;
        }
        Ok(())
    }

    fn flag(&mut self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some(v) = self.raw(key) {
            *slot = match v {
                "true" | "1" | "yes" | "on" => true,
                "false" | "0" | "no" | "off" => false,
                _ => return Err(Error::Parse(format!("`{key}`: expected a boolean, got `{v}`"))),
            };
        }
        Ok(())
    }

    fn with<T>(&mut self, key: &str, slot: &mut T, f: impl Fn(&str) -> Result<T>) -> Result<()> {
        if let Some(v) = self.raw(key) {
            *slot = f(v).map_err(|e| Error::Parse(format!("`{key}`: {e}")))?;
        }
        Ok(())
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad list entry `{s}`"))))
        .collect()
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse(format!("bad number `{s}`")))
}

pub fn parse_neuron_rule(v: &str) -> Result<NeuronRule> {
    let (kind, n) = v
        .split_once(':')
        .ok_or_else(|| Error::Parse(format!("neuron rule `{v}` is not kind:value")))?;
    match kind {
        "fraction" => Ok(NeuronRule::Fraction(parse_num(n)?)),
        "count" => Ok(NeuronRule::Count(parse_num(n)?)),
        "threshold" => Ok(NeuronRule::Threshold(parse_num(n)?)),
        _ => Err(Error::Parse(format!("unknown neuron rule `{kind}`"))),
    }
}

pub fn parse_layer_rule(v: &str) -> Result<LayerRule> {
    let (kind, n) = v
        .split_once(':')
        .ok_or_else(|| Error::Parse(format!("layer rule `{v}` is not kind:value")))?;
    match kind {
        "count" => Ok(LayerRule::Count(parse_num(n)?)),
        "threshold" => Ok(LayerRule::Threshold(parse_num(n)?)),
        _ => Err(Error::Parse(format!("unknown layer rule `{kind}`"))),
    }
}

fn neuron_rule_text(r: NeuronRule) -> String {
    match r {
        NeuronRule::Fraction(p) => format!("fraction:{p}"),
        NeuronRule::Count(k) => format!("count:{k}"),
        NeuronRule::Threshold(s) => format!("threshold:{s}"),
    }
}

fn layer_rule_text(r: LayerRule) -> String {
    match r {
        LayerRule::Count(m) => format!("count:{m}"),
        LayerRule::Threshold(s) => format!("threshold:{s}"),
    }
}

fn optional(v: &str) -> Result<Option<usize>> {
    match v {
        "none" | "" => Ok(None),
        _ => Ok(Some(parse_num(v)?)),
    }
}

fn probe_source(v: &str) -> Result<ProbeSource> {
    match v {
        "current" => Ok(ProbeSource::CurrentShard),
        _ => v
            .strip_prefix("shard:")
            .and_then(|n| n.parse().ok())
            .map(ProbeSource::Shard)
            .ok_or_else(|| Error::Parse(format!("bad probe source `{v}`"))),
    }
}

impl RunConfig {
    pub fn from_file(file: &ConfigFile) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut r = Reader {
            file,
            used: BTreeSet::new(),
        };

        let d = &mut c.data;
        r.with("data.operators", &mut d.operators, |v| Ok(v.chars().filter(|c| !c.is_whitespace()).collect()))?;
        r.parse("data.operand_min", &mut d.operand_min)?;
        r.parse("data.operand_max", &mut d.operand_max)?;
        r.parse("data.num_ops", &mut d.num_ops)?;
        r.parse("data.seed", &mut d.seed)?;
        r.parse("data.train_size", &mut d.train_size)?;
        r.parse("data.rl_size", &mut d.rl_size)?;
        r.parse("data.bench_size", &mut d.bench_size)?;
        r.parse("data.shards", &mut d.shards)?;

        let (mut layers, mut d_ff) = (c.model.n_layers(), c.model.ffn_widths.first().copied().unwrap_or(256));
        r.parse("model.d_model", &mut c.model.d_model)?;
        r.parse("model.n_heads", &mut c.model.n_heads)?;
        r.parse("model.n_layers", &mut layers)?;
        r.parse("model.d_ff", &mut d_ff)?;
        r.parse("model.max_seq_len", &mut c.model.max_seq_len)?;
        r.parse("model.seed", &mut c.model_seed)?;
        c.model.ffn_widths = vec![d_ff; layers];
        c.data.max_seq_len = c.model.max_seq_len;

        r.parse("train.steps", &mut c.train.steps)?;
        r.parse("train.batch_size", &mut c.train.batch_size)?;
        r.parse("train.lr", &mut c.train.lr)?;
        r.parse("train.max_len", &mut c.train.max_len)?;
        r.parse("train.shard", &mut c.train.shard)?;
        r.parse("train.seed", &mut c.train.seed)?;
        r.parse("train.segment", &mut c.train_segment)?;

        r.with("prune.neuron_rule", &mut c.criterion.neuron, parse_neuron_rule)?;
        r.with("prune.layer_rule", &mut c.criterion.layer, parse_layer_rule)?;
        r.with("prune.protected", &mut c.criterion.protected_layers, |v| {
            Ok(parse_list(v)?.into_iter().collect())
        })?;

        let p = &mut c.looping.profile;
        r.with("profile.neuron_mode", &mut p.neuron_mode, Aggregation::parse)?;
        r.flag("profile.weight_by_down_row", &mut p.weight_by_down_row)?;
        r.with("profile.layer_mode", &mut p.layer_mode, Aggregation::parse)?;
        r.flag("profile.normalized", &mut p.normalized)?;
        r.with("profile.probe", &mut p.probe, probe_source)?;
        r.with("profile.probe_limit", &mut p.probe_limit, optional)?;

        let l = &mut c.looping;
        r.parse("loop.rounds", &mut l.rounds)?;
        r.with("loop.order", &mut l.order, PruneOrder::parse)?;
        r.parse("loop.layer_rounds", &mut l.layer_rounds)?;
        r.with("loop.target_params", &mut l.target_params, optional)?;
        r.flag("loop.clip_to_target", &mut l.clip_to_target)?;
        r.with("loop.recovery", &mut l.recovery, RecoveryKind::parse)?;
        r.parse("loop.budget", &mut l.pretrain.steps)?;
        r.parse("loop.batch_size", &mut l.pretrain.batch_size)?;
        r.parse("loop.lr", &mut l.pretrain.lr)?;
        r.parse("loop.max_len", &mut l.pretrain.max_len)?;
        r.parse("loop.flops_seq_len", &mut l.flops_seq_len)?;
        r.parse("loop.seed", &mut l.seed)?;

        r.parse("rl.updates", &mut l.rl.steps)?;
        r.parse("rl.prompts_per_update", &mut l.rl.batch_size)?;
        r.parse("rl.lr", &mut l.rl.lr)?;
        r.parse("rl.max_new", &mut l.rl.max_len)?;
        r.parse("rl.group_size", &mut l.reward.group_size)?;
        r.parse("rl.format_reward", &mut l.reward.format_reward)?;
        r.parse("rl.accuracy_reward", &mut l.reward.accuracy_reward)?;
        r.parse("rl.eps", &mut l.reward.eps)?;
        r.flag("rl.normalize_std", &mut l.reward.normalize_std)?;
        r.parse("rl.temperature", &mut l.reward.temperature)?;
        r.parse("rl.kl_coef", &mut l.reward.kl_coef)?;
        r.parse("rl.seed", &mut l.rl.seed)?;

        let unknown: Vec<&str> = file.keys().filter(|k| !r.used.contains(*k)).collect();
        if !unknown.is_empty() {
            return Err(Error::Parse(format!("unknown config keys: {}", unknown.join(", "))));
        }
        c.model.vocab_size = VOCAB_SIZE;
        c.model.validate()?;
        c.criterion.validate()?;
        c.looping.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_file(&ConfigFile::parse(text)?)
    }

    /// Every setting written back in config-file syntax.
    pub fn to_file(&self) -> ConfigFile {
        let mut f = ConfigFile::default();
        let d = &self.data;
        f.set("data.operators", d.operators.iter().collect::<String>());
        f.set("data.operand_min", d.operand_min.to_string());
        f.set("data.operand_max", d.operand_max.to_string());
        f.set("data.num_ops", d.num_ops.to_string());
        f.set("data.seed", d.seed.to_string());
        f.set("data.train_size", d.train_size.to_string());
        f.set("data.rl_size", d.rl_size.to_string());
        f.set("data.bench_size", d.bench_size.to_string());
        f.set("data.shards", d.shards.to_string());
        let m = &self.model;
        f.set("model.d_model", m.d_model.to_string());
        f.set("model.n_heads", m.n_heads.to_string());
        f.set("model.n_layers", m.n_layers().to_string());
        f.set("model.d_ff", m.ffn_widths.first().copied().unwrap_or(0).to_string());
        f.set("model.max_seq_len", m.max_seq_len.to_string());
        f.set("model.seed", self.model_seed.to_string());
        let t = &self.train;
        f.set("train.steps", t.steps.to_string());
        f.set("train.batch_size", t.batch_size.to_string());
        f.set("train.lr", t.lr.to_string());
        f.set("train.max_len", t.max_len.to_string());
        f.set("train.shard", t.shard.to_string());
        f.set("train.seed", t.seed.to_string());
        f.set("train.segment", self.train_segment.to_string());
        let c = &self.criterion;
        f.set("prune.neuron_rule", neuron_rule_text(c.neuron));
        f.set("prune.layer_rule", layer_rule_text(c.layer));
        f.set(
            "prune.protected",
            c.protected_layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
        );
        let p: &ProfileSettings = &self.looping.profile;
        f.set("profile.neuron_mode", p.neuron_mode.tag());
        f.set("profile.weight_by_down_row", p.weight_by_down_row.to_string());
        f.set("profile.layer_mode", p.layer_mode.tag());
        f.set("profile.normalized", p.normalized.to_string());
        f.set(
            "profile.probe",
            match p.probe {
                ProbeSource::CurrentShard => "current".to_string(),
                ProbeSource::Shard(s) => format!("shard:{s}"),
            },
        );
        f.set("profile.probe_limit", p.probe_limit.map_or("none".into(), |v| v.to_string()));
        let l = &self.looping;
        f.set("loop.rounds", l.rounds.to_string());
        f.set("loop.order", l.order.tag());
        f.set("loop.layer_rounds", l.layer_rounds.to_string());
        f.set("loop.target_params", l.target_params.map_or("none".into(), |v| v.to_string()));
        f.set("loop.clip_to_target", l.clip_to_target.to_string());
        f.set("loop.recovery", l.recovery.tag());
        f.set("loop.budget", l.pretrain.steps.to_string());
        f.set("loop.batch_size", l.pretrain.batch_size.to_string());
        f.set("loop.lr", l.pretrain.lr.to_string());
        f.set("loop.max_len", l.pretrain.max_len.to_string());
        f.set("loop.flops_seq_len", l.flops_seq_len.to_string());
        f.set("loop.seed", l.seed.to_string());
        f.set("rl.updates", l.rl.steps.to_string());
        f.set("rl.prompts_per_update", l.rl.batch_size.to_string());
        f.set("rl.lr", l.rl.lr.to_string());
        f.set("rl.max_new", l.rl.max_len.to_string());
        f.set("rl.group_size", l.reward.group_size.to_string());
        f.set("rl.format_reward", l.reward.format_reward.to_string());
        f.set("rl.accuracy_reward", l.reward.accuracy_reward.to_string());
        f.set("rl.eps", l.reward.eps.to_string());
        f.set("rl.normalize_std", l.reward.normalize_std.to_string());
        f.set("rl.temperature", l.reward.temperature.to_string());
        f.set("rl.kl_coef", l.reward.kl_coef.to_string());
        f.set("rl.seed", l.rl.seed.to_string());
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_comments_and_errors() {
        let f = ConfigFile::parse("# top\n[loop]\nrounds = 3 # inline\n\n[model]\nd_model=32\n").unwrap();
        assert_eq!(f.get("loop.rounds"), Some("3"));
        assert_eq!(f.get("model.d_model"), Some("32"));
        assert!(ConfigFile::parse("rounds = 3").is_err());
        assert!(ConfigFile::parse("[a]\nx = 1\nx = 2").is_err());
        assert!(ConfigFile::parse("[a]\njunk").is_err());
    }

    #[test]
    fn typed_fields_and_unknown_keys() {
        let c = RunConfig::parse(
            "[prune]\nneuron_rule = count:7\nlayer_rule = threshold:0.5\nprotected =\n[loop]\norder = alternating\nrounds = 6\n",
        )
        .unwrap();
        assert_eq!(c.criterion.neuron, NeuronRule::Count(7));
        assert_eq!(c.criterion.layer, LayerRule::Threshold(0.5));
        assert!(c.criterion.protected_layers.is_empty());
        assert_eq!(c.looping.order, PruneOrder::Alternating);
        assert!(RunConfig::parse("[loop]\nroundz = 3\n").is_err());
        assert!(RunConfig::parse("[loop]\nrounds = three\n").is_err());
        assert!(RunConfig::parse("[loop]\norder = sideways\n").is_err());
    }

    #[test]
    fn to_file_round_trips() {
        let mut c = RunConfig::default();
        c.looping.target_params = Some(1234);
        c.criterion.neuron = NeuronRule::Fraction(0.05);
        let text = c.to_file().to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }
}
