//! `prunetune`: command-line driver for profiling, pruning, recovery
//! tuning, and the prune-tune loop on the toy arithmetic task.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use prunetune::checkpoint::{load_checkpoint, save_checkpoint};
use prunetune::config::{ConfigFile, RunConfig};
use prunetune::io::{file_hash, unix_seconds, write_atomic, RunManifest};
use prunetune::metrics::{count_flops, count_params, eval_accuracy, measure_speedup};
use prunetune::profiler::{profile_layers, profile_neurons};
use prunetune::prune_loop::{
    accuracy_curve, history_csv, markdown_report, one_shot_criterion, parse_history_csv, plan_schedule,
    probe_for, prune_once_baseline, run_loop, select, timing_csv, LoopData, LoopHistory, ProbeSource, ReportRow,
    RoundKind,
};
use prunetune::pruner::{apply_prune, verify_surgery};
use prunetune::toydata::{decode, generate_toy_corpus, ToyData};
use prunetune::tuner::{curve_csv, pretrain_segmented, rl_recover, Corpus, TrainConfig};
use prunetune::{Error, TransformerModel};

#[derive(Parser, Debug)]
#[command(name = "prunetune", version, about = "Iterative structured pruning with recovery tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Neuron rule `fraction:<p>`.
    #[arg(long)]
    neuron_frac: Option<f32>,
    /// Layer rule `count:<m>`.
    #[arg(long)]
    layer_count: Option<usize>,
    /// neurons-then-layers, layers-then-neurons, or alternating.
    #[arg(long)]
    order: Option<String>,
    /// continual, rl, or both.
    #[arg(long)]
    recovery: Option<String>,
    /// Training steps (tune), updates (rl), or per-round budget (loop, prune-once).
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    shard: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the toy corpus splits as text.
    Generate(Common),
    /// Write neuron and layer profiles of a checkpoint.
    Profile(Common),
    /// Apply one surgery with the configured criterion.
    Prune(Common),
    /// Continual pretraining on one shard; without --checkpoint, trains a
    /// fresh model on the whole training split.
    Tune(Common),
    /// Group-relative policy-gradient recovery.
    Rl(Common),
    /// The prune-tune loop.
    Loop(Common),
    /// One surgery removing what the loop would, then the same recovery budget.
    PruneOnce(Common),
    /// Benchmark accuracy, parameters, and FLOPs of a checkpoint.
    Eval(Common),
    /// Markdown table from loop output directories.
    Report {
        /// Directories holding history.csv and summary.txt.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

struct Failure {
    kind: &'static str,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind(),
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        kind: "usage",
        msg: msg.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Config file plus flag overrides for `command`.
fn effective_config(command: &str, c: &Common) -> CliResult<RunConfig> {
    let mut file = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure {
                kind: "io",
                msg: format!("cannot read {}: {e}", p.display()),
            })?;
            ConfigFile::parse(&text)?
        }
        None => ConfigFile::default(),
    };
    if let Some(seed) = c.seed {
        let key = match command {
            "generate" => "data.seed",
            "tune" => "train.seed",
            "rl" => "rl.seed",
            _ => "loop.seed",
        };
        file.set(key, seed.to_string());
    }
    if let Some(r) = c.rounds {
        file.set("loop.rounds", r.to_string());
    }
    if let Some(p) = c.neuron_frac {
        file.set("prune.neuron_rule", format!("fraction:{p}"));
    }
    if let Some(m) = c.layer_count {
        file.set("prune.layer_rule", format!("count:{m}"));
    }
    if let Some(o) = &c.order {
        file.set("loop.order", o.clone());
    }
    if let Some(r) = &c.recovery {
        file.set("loop.recovery", r.clone());
    }
    if let Some(b) = c.budget {
        let key = match command {
            "tune" => "train.steps",
            "rl" => "rl.updates",
            _ => "loop.budget",
        };
        file.set(key, b.to_string());
    }
    if let Some(s) = c.shard {
        match command {
            "tune" => file.set("train.shard", s.to_string()),
            _ => file.set("profile.probe", format!("shard:{s}")),
        }
    }
    Ok(RunConfig::from_file(&file)?)
}

struct Run {
    manifest: RunManifest,
    out: PathBuf,
}

impl Run {
    fn start(command: &str, c: &Common, cfg: &RunConfig) -> CliResult<Self> {
        std::fs::create_dir_all(&c.out).map_err(|e| Failure {
            kind: "io",
            msg: format!("cannot create {}: {e}", c.out.display()),
        })?;
        let input_checkpoint = match &c.checkpoint {
            Some(p) => Some((p.clone(), file_hash(p)?)),
            None => None,
        };
        Ok(Run {
            manifest: RunManifest {
                command: command.to_string(),
                config: cfg.to_file().to_text(),
                seeds: vec![
                    ("data".into(), cfg.data.seed),
                    ("model".into(), cfg.model_seed),
                    ("train".into(), cfg.train.seed),
                    ("loop".into(), cfg.looping.seed),
                    ("rl".into(), cfg.looping.rl.seed),
                ],
                input_checkpoint,
                started_unix: unix_seconds(),
                ..RunManifest::default()
            },
            out: c.out.clone(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.out.join(name);
        write_atomic(&path, bytes)?;
        self.manifest.outputs.push(path);
        Ok(())
    }

    fn save(&mut self, name: &str, model: &TransformerModel) -> CliResult<()> {
        let path = self.out.join(name);
        save_checkpoint(model, &path)?;
        self.manifest.outputs.push(path);
        Ok(())
    }

    fn finish(mut self, shards: String) -> CliResult<()> {
        self.manifest.shards = shards;
        self.manifest.finished_unix = unix_seconds();
        let path = self.manifest.write(&self.out)?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

fn input_model(c: &Common) -> CliResult<TransformerModel> {
    let p = c.checkpoint.as_ref().ok_or_else(|| usage("--checkpoint is required"))?;
    Ok(load_checkpoint(p)?)
}

fn probe_shard(cfg: &RunConfig) -> usize {
    match cfg.looping.profile.probe {
        ProbeSource::CurrentShard => 0,
        ProbeSource::Shard(s) => s,
    }
}

fn tsv(tasks: &prunetune::tuner::RlTaskSet) -> String {
    tasks
        .tasks
        .iter()
        .map(|t| format!("{}\t{}\n", decode(&t.prompt), decode(&t.answer)))
        .collect()
}

fn generate(c: &Common) -> CliResult<()> {
    let cfg = effective_config("generate", c)?;
    let mut run = Run::start("generate", c, &cfg)?;
    let data = generate_toy_corpus(&cfg.data)?;
    let train: String = data.corpus.sequences().iter().map(|s| decode(s) + "\n").collect();
    run.write("train.txt", train.as_bytes())?;
    run.write("rl.tsv", tsv(&data.rl_tasks).as_bytes())?;
    run.write("bench.tsv", tsv(&data.benchmark).as_bytes())?;
    run.finish(format!("{} shards of {}", data.corpus.num_shards(), data.corpus.shard_len()))
}

fn loop_data(cfg: &RunConfig) -> CliResult<LoopData> {
    let d: ToyData = generate_toy_corpus(&cfg.data)?;
    Ok(d.into())
}

fn profile(c: &Common) -> CliResult<()> {
    let cfg = effective_config("profile", c)?;
    let model = input_model(c)?;
    let mut run = Run::start("profile", c, &cfg)?;
    let data = loop_data(&cfg)?;
    let shard = probe_shard(&cfg);
    let probe = probe_for(&data, &cfg.looping, shard)?;
    let p = &cfg.looping.profile;
    let neurons = profile_neurons(&model, &probe, p.neuron_mode, p.weight_by_down_row)?;
    let layers = profile_layers(&model, &probe, p.layer_mode, p.normalized)?;
    run.write("neurons.profile", neurons.to_text().as_bytes())?;
    run.write("layers.profile", layers.to_text().as_bytes())?;
    run.finish(format!("probe shard {shard}"))
}

fn prune(c: &Common) -> CliResult<()> {
    let cfg = effective_config("prune", c)?;
    let model = input_model(c)?;
    let mut run = Run::start("prune", c, &cfg)?;
    let data = loop_data(&cfg)?;
    let shard = probe_shard(&cfg);
    let probe = probe_for(&data, &cfg.looping, shard)?;
    let r = select(&model, RoundKind::Both, &cfg.criterion, &probe, &cfg.looping)?;
    let pruned = apply_prune(&model, &r)?;
    let report = verify_surgery(&model, &pruned, &probe, f32::INFINITY)?;
    run.save("model.ckpt", &pruned)?;
    run.write("redundancy.txt", r.to_text().as_bytes())?;
    let summary = format!(
        "params_before={}\nparams_after={}\nmax_logit_delta={}\nflops_removed={}\n",
        count_params(&model),
        count_params(&pruned),
        report.max_logit_delta,
        report.flops_removed
    );
    run.write("surgery.txt", summary.as_bytes())?;
    run.finish(format!("probe shard {shard}"))
}

/// A fresh model trained on every training sequence.
fn train_base(cfg: &RunConfig, data: &LoopData) -> CliResult<(TransformerModel, Vec<f32>)> {
    let init = TransformerModel::init(cfg.model_seed, cfg.model.clone())?;
    let all = Corpus::new(data.corpus.sequences().to_vec(), 1)?;
    let train = TrainConfig { shard: 0, ..cfg.train.clone() };
    Ok(pretrain_segmented(&init, &all, &train, cfg.train_segment)?)
}

fn base_model(c: &Common, cfg: &RunConfig, data: &LoopData, run: &mut Run) -> CliResult<TransformerModel> {
    if c.checkpoint.is_some() {
        return input_model(c);
    }
    info!("training a base model for {} steps", cfg.train.steps);
    let (model, curve) = train_base(cfg, data)?;
    run.save("base.ckpt", &model)?;
    run.write("base_loss.csv", curve_csv(&curve).as_bytes())?;
    Ok(model)
}

fn tune(c: &Common) -> CliResult<()> {
    let cfg = effective_config("tune", c)?;
    let mut run = Run::start("tune", c, &cfg)?;
    let data = loop_data(&cfg)?;
    let (model, curve) = match &c.checkpoint {
        Some(_) => pretrain_segmented(&input_model(c)?, &data.corpus, &cfg.train, cfg.train_segment)?,
        None => train_base(&cfg, &data)?,
    };
    run.save("model.ckpt", &model)?;
    run.write("loss.csv", curve_csv(&curve).as_bytes())?;
    let acc = eval_accuracy(&model, &data.benchmark)?;
    run.write("eval.txt", format!("accuracy={acc}\n").as_bytes())?;
    let shards = match c.checkpoint {
        Some(_) => format!("train shard {}", cfg.train.shard),
        None => "whole training split".into(),
    };
    run.finish(shards)
}

fn rl(c: &Common) -> CliResult<()> {
    let cfg = effective_config("rl", c)?;
    let model = input_model(c)?;
    let mut run = Run::start("rl", c, &cfg)?;
    let data = loop_data(&cfg)?;
    let (tuned, curve) = rl_recover(&model, &data.rl_tasks, &cfg.looping.reward, &cfg.looping.rl)?;
    run.save("model.ckpt", &tuned)?;
    run.write("reward.csv", curve_csv(&curve).as_bytes())?;
    run.finish("rl split".into())
}

fn write_history(run: &mut Run, label: &str, h: &LoopHistory, base: &TransformerModel, data: &LoopData) -> CliResult<()> {
    run.write("history.csv", history_csv(&h.records).as_bytes())?;
    run.write("timing.csv", timing_csv(&h.records).as_bytes())?;
    run.write("accuracy.csv", accuracy_curve(h.base_accuracy, &h.records).as_bytes())?;
    run.save("final.ckpt", &h.final_model)?;
    let speedup = measure_speedup(base, &h.final_model, &data.benchmark, 3)?;
    let summary = format!(
        "label={label}\nbase_accuracy={}\nbase_params={}\nbase_flops={}\nspeedup={speedup}\n",
        h.base_accuracy, h.base_params, h.base_flops
    );
    run.write("summary.txt", summary.as_bytes())
}

fn shard_note(data: &LoopData) -> String {
    format!("round t uses shard t mod {}", data.corpus.num_shards())
}

fn prune_loop(c: &Common) -> CliResult<()> {
    let cfg = effective_config("loop", c)?;
    let mut run = Run::start("loop", c, &cfg)?;
    let data = loop_data(&cfg)?;
    let base = base_model(c, &cfg, &data, &mut run)?;
    let h = match run_loop(&base, &data, &cfg.criterion, &cfg.looping) {
        Ok(h) => h,
        Err(f) => {
            run.write("history.csv", history_csv(&f.history.records).as_bytes())?;
            return Err(f.error.into());
        }
    };
    write_history(&mut run, "PTL", &h, &base, &data)?;
    run.finish(shard_note(&data))
}

fn prune_once(c: &Common) -> CliResult<()> {
    let cfg = effective_config("prune-once", c)?;
    let mut run = Run::start("prune-once", c, &cfg)?;
    let data = loop_data(&cfg)?;
    let base = base_model(c, &cfg, &data, &mut run)?;
    let plan = plan_schedule(&base.config, &cfg.criterion, &cfg.looping)?;
    let crit = one_shot_criterion(&base.config, &plan, &cfg.criterion);
    let looping = prunetune::prune_loop::LoopConfig {
        rounds: plan.len().max(1),
        ..cfg.looping.clone()
    };
    let h = prune_once_baseline(&base, &data, &crit, &looping).map_err(|f| Failure::from(f.error))?;
    write_history(&mut run, "Prune-Once", &h, &base, &data)?;
    run.finish(shard_note(&data))
}

fn eval(c: &Common) -> CliResult<()> {
    let cfg = effective_config("eval", c)?;
    let model = input_model(c)?;
    let mut run = Run::start("eval", c, &cfg)?;
    let data = loop_data(&cfg)?;
    let acc = eval_accuracy(&model, &data.benchmark)?;
    let text = format!(
        "accuracy={acc}\nparams={}\nflops={}\nflops_seq_len={}\n",
        count_params(&model),
        count_flops(&model, cfg.looping.flops_seq_len),
        cfg.looping.flops_seq_len
    );
    print!("{text}");
    run.write("eval.txt", text.as_bytes())?;
    run.finish("benchmark split".into())
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure {
        kind: "io",
        msg: format!("cannot read {}: {e}", path.display()),
    })
}

fn summary_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
}

fn report(runs: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut rows = Vec::new();
    let mut base_row = None;
    for dir in runs {
        let records = parse_history_csv(&read_text(&dir.join("history.csv"))?)?;
        let summary = read_text(&dir.join("summary.txt")).unwrap_or_default();
        let num = |k: &str| summary_value(&summary, k).and_then(|v| v.parse::<f64>().ok());
        let base_params = num("base_params").map_or_else(|| records.first().map_or(0, |r| r.params_before), |v| v as usize);
        let base_flops = num("base_flops").map_or_else(|| records.first().map_or(0, |r| r.flops_before), |v| v as u64);
        let base_accuracy = num("base_accuracy").unwrap_or(f64::NAN) as f32;
        let label = summary_value(&summary, "label")
            .map(str::to_string)
            .unwrap_or_else(|| dir.display().to_string());
        if base_row.is_none() && !base_accuracy.is_nan() {
            base_row = Some(ReportRow::from_history("Base", base_accuracy, base_params, base_flops, &[]));
        }
        let mut row = ReportRow::from_history(&label, base_accuracy, base_params, base_flops, &records);
        row.speedup = num("speedup");
        rows.push(row);
    }
    rows.splice(0..0, base_row);
    let table = markdown_report(&rows);
    print!("{table}");
    std::fs::create_dir_all(out).map_err(|e| Failure {
        kind: "io",
        msg: format!("cannot create {}: {e}", out.display()),
    })?;
    write_atomic(&out.join("report.md"), table.as_bytes())?;
    let manifest = RunManifest {
        command: "report".into(),
        outputs: vec![out.join("report.md")],
        shards: "none".into(),
        config: runs.iter().map(|r| format!("run = {}\n", r.display())).collect(),
        started_unix: unix_seconds(),
        finished_unix: unix_seconds(),
        ..RunManifest::default()
    };
    manifest.write(out)?;
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(c) => generate(&c),
        Command::Profile(c) => profile(&c),
        Command::Prune(c) => prune(&c),
        Command::Tune(c) => tune(&c),
        Command::Rl(c) => rl(&c),
        Command::Loop(c) => prune_loop(&c),
        Command::PruneOnce(c) => prune_once(&c),
        Command::Eval(c) => eval(&c),
        Command::Report { runs, out } => report(&runs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: kind={} msg={}", f.kind, f.msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
