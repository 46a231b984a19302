//! Command line front end of the `afpm` binary.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use crate::ablation::{parse_variants, run_ablation, AblationPlan, RawDataset};
use crate::align::{align_dataset, load_template_inputs, align_trials, AlignStages, AlignedLayout, TemplateInput};
use crate::data::{load_all_trials, load_manifest, DatasetManifest, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate, finetune_and_evaluate};
use crate::preprocess::preprocess_dataset;
use crate::synth::{gen_erp_dataset, gen_mi_dataset, ChannelPreset, SynthSpec};
use crate::train::{train, write_loss_csv, Checkpoint};

pub use config::{merge_json, resolve_config, FinetuneConfig, Overrides, RunConfig};

/// Relative input paths are resolved against this directory when it is set.
pub const DATA_ROOT_ENV: &str = "AFPM_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "afpm", version, about = "Calibration-free cross-dataset EEG decoding")]
pub struct Cli {
    /// Worker threads; 1 gives a fixed reduction order on every platform.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset.
    Synth(SynthArgs),
    /// Band-pass, resample and rescale a dataset.
    Preprocess(PreprocessArgs),
    /// Select channels, align each domain and map onto the task template.
    Align(AlignArgs),
    /// Train a model on aligned datasets.
    Train(TrainArgs),
    /// Evaluate a checkpoint without calibration.
    Eval(EvalArgs),
    /// Train and evaluate each pipeline variant on the same data.
    Ablate(AblateArgs),
    /// Tune a checkpoint on the first part of each subject's trials.
    Finetune(FinetuneArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub task: Task,
    #[arg(long, default_value_t = 4)]
    pub domains: usize,
    /// Trials per domain.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Signal to noise ratio in dB.
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    pub snr: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Channel layout preset: full, varied or disjoint.
    #[arg(long, default_value = "varied")]
    pub channels: ChannelPreset,
    /// Dataset name; defaults to synth-<task>.
    #[arg(long)]
    pub name: Option<String>,
}

/// Settings shared by commands that resolve a run configuration.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON configuration file, overriding the task preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dim_head: Option<usize>,
    #[arg(long)]
    pub dim_mlp: Option<usize>,
    /// Patch embedding width.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub frame_window: Option<usize>,
    #[arg(long)]
    pub frame_stride: Option<usize>,
    #[arg(long)]
    pub avg_window: Option<usize>,
    #[arg(long)]
    pub avg_shift: Option<usize>,
    #[arg(long)]
    pub token_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr_init: Option<f64>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Draw batches uniformly instead of class-balanced.
    #[arg(long)]
    pub no_balanced: bool,
}

impl ConfigArgs {
    fn overrides(&self) -> Overrides {
        let mut o: Overrides = Vec::new();
        let mut put = |k: &'static str, v: Option<Value>| {
            if let Some(v) = v {
                o.push((k, v));
            }
        };
        put("train.seed", self.seed.map(|v| json!(v)));
        put("eval.seed", self.seed.map(|v| json!(v)));
        put("model.transformer.depth", self.depth.map(|v| json!(v)));
        put("model.transformer.heads", self.heads.map(|v| json!(v)));
        put("model.transformer.dim_head", self.dim_head.map(|v| json!(v)));
        put("model.transformer.dim_mlp", self.dim_mlp.map(|v| json!(v)));
        put("model.fpe.embed_dim", self.embed_dim.map(|v| json!(v)));
        put("model.fpe.frame_window", self.frame_window.map(|v| json!(v)));
        put("model.fpe.frame_stride", self.frame_stride.map(|v| json!(v)));
        put("model.fpe.avg_window", self.avg_window.map(|v| json!(v)));
        put("model.fpe.avg_shift", self.avg_shift.map(|v| json!(v)));
        put("model.fpe.token_dim", self.token_dim.map(|v| json!(v)));
        put("train.epochs", self.epochs.map(|v| json!(v)));
        put("train.batch_size", self.batch_size.map(|v| json!(v)));
        put("train.max_steps", self.max_steps.map(|v| json!(v)));
        put("train.lr_init", self.lr_init.map(|v| json!(v)));
        put("train.lr_max", self.lr_max.map(|v| json!(v)));
        put("train.weight_decay", self.weight_decay.map(|v| json!(v)));
        put("train.balanced_sampling", self.no_balanced.then(|| json!(false)));
        o
    }

    fn resolve(&self, task: Task, threads: Option<usize>, mut extra: Overrides) -> Result<RunConfig> {
        let mut o = self.overrides();
        o.append(&mut extra);
        if let Some(n) = threads {
            o.push(("threads", json!(n)));
        }
        resolve_config(task, self.config.as_deref(), &o)
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in", alias = "data")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pass band as LO:HI in Hz.
    #[arg(long)]
    pub band: Option<String>,
    /// Target sampling rate in Hz.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Factor converting stored values to volts-scale units.
    #[arg(long)]
    pub unit_scale: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Preprocessed datasets. With several, each is written to OUT/<name>.
    #[arg(long = "in", alias = "data", num_args = 1.., required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub task: Task,
    /// Keep every channel of the inputs instead of the task template's.
    #[arg(long)]
    pub no_select: bool,
    /// Skip per-domain Euclidean alignment.
    #[arg(long)]
    pub no_ea: bool,
    /// Keep each dataset's channel order, zero padded, instead of template rows.
    #[arg(long)]
    pub no_map: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Aligned datasets sharing one layout.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub task: Task,
    /// Checkpoint path; the resolved config and loss history are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Aligned or preprocessed datasets; the latter are aligned with the checkpoint's layout.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub task: Task,
    #[arg(long, default_value_t = 1)]
    pub folds: usize,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Preprocessed training datasets.
    #[arg(long, num_args = 1.., required = true)]
    pub train: Vec<PathBuf>,
    /// Preprocessed evaluation datasets.
    #[arg(long, num_args = 1.., required = true)]
    pub eval: Vec<PathBuf>,
    #[arg(long)]
    pub task: Task,
    /// `all` or a comma-separated list such as NO_EA,NO_MAP.
    #[arg(long, default_value = "all")]
    pub variants: String,
    /// Output directory for ablation.csv, ablation.json and config.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Aligned or preprocessed dataset of the target subjects.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Output directory: one tuned checkpoint per subject plus a JSON report.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Runs a parsed command line inside a pool of the requested size.
pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == Some(0) {
        return Err(Error::config("threads", "must be at least 1"));
    }
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::config("threads", e.to_string()))?;
    pool.install(|| dispatch(cli.command, cli.threads))
}

fn dispatch(cmd: Command, threads: Option<usize>) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a, threads),
        Command::Align(a) => cmd_align(a),
        Command::Train(a) => cmd_train(a, threads),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a, threads),
        Command::Finetune(a) => cmd_finetune(a, threads),
    }
}

/// Resolves a relative input path against the data root, if one is set.
pub fn data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if p.is_relative() && !p.exists() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn load(p: &Path) -> Result<DatasetManifest> {
    load_manifest(&data_path(p))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.into(), source })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn check_task(m: &DatasetManifest, task: Task) -> Result<()> {
    if m.task != task {
        return Err(Error::TemplateMismatch(format!("dataset {} is {}, command expects {}", m.name, m.task, task)));
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::new(a.task, a.domains, a.trials, a.snr, a.channels, a.seed)?;
    if let Some(n) = a.name {
        spec.name = n;
    }
    let m = match a.task {
        Task::Mi => gen_mi_dataset(&spec, a.seed, &a.out)?,
        Task::Erp => gen_erp_dataset(&spec, a.seed, &a.out)?,
    };
    info!("wrote {} trials to {}", m.trials.len(), a.out.display());
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs, threads: Option<usize>) -> Result<()> {
    let m = load(&a.input)?;
    let mut o: Overrides = Vec::new();
    if let Some(band) = &a.band {
        let (lo, hi) = band
            .split_once(':')
            .and_then(|(l, h)| Some((l.trim().parse::<f64>().ok()?, h.trim().parse::<f64>().ok()?)))
            .ok_or_else(|| Error::arg(format!("--band expects LO:HI, got {band:?}")))?;
        o.push(("preprocess.band_lo_hz", json!(lo)));
        o.push(("preprocess.band_hi_hz", json!(hi)));
    }
    if let Some(r) = a.rate {
        o.push(("preprocess.target_rate_hz", json!(r)));
    }
    if let Some(u) = a.unit_scale {
        o.push(("preprocess.unit_scale", json!(u)));
    }
    if let Some(n) = threads {
        o.push(("threads", json!(n)));
    }
    let cfg = resolve_config(m.task, a.config.as_deref(), &o)?;
    let out = preprocess_dataset(&m, &cfg.preprocess, &a.out)?;
    cfg.echo(&a.out.join("config.json"))?;
    info!("preprocessed {} trials into {}", out.trials.len(), a.out.display());
    Ok(())
}

fn cmd_align(a: AlignArgs) -> Result<()> {
    let stages = AlignStages { select: !a.no_select, euclidean: !a.no_ea, map: !a.no_map };
    let manifests: Vec<DatasetManifest> = a.input.iter().map(|p| load(p)).collect::<Result<_>>()?;
    for m in &manifests {
        check_task(m, a.task)?;
    }
    let mut layout = AlignedLayout::new(a.task, stages);
    if !stages.select {
        let trials: Vec<_> = manifests.iter().map(load_all_trials).collect::<Result<_>>()?;
        layout = layout.with_channel_union(trials.iter().flatten().map(|t| t.channels.as_slice()))?;
    }
    for m in &manifests {
        let out = if manifests.len() == 1 { a.out.clone() } else { a.out.join(&m.name) };
        let r = align_dataset(m, &layout, &out)?;
        info!("aligned {} trials of {} into {}", r.trials.len(), m.name, out.display());
    }
    Ok(())
}

/// Template inputs of a dataset for `layout`: aligned datasets must match it,
/// preprocessed ones are aligned on the fly.
fn inputs_for(m: &DatasetManifest, layout: &AlignedLayout) -> Result<Vec<TemplateInput>> {
    check_task(m, layout.task())?;
    if m.layout.is_some() {
        let (l, x) = load_template_inputs(m)?;
        if l != *layout {
            return Err(Error::TemplateMismatch(format!(
                "dataset {} was aligned with a different layout ({} rows) than the checkpoint ({} rows)",
                m.name,
                l.n_channels(),
                layout.n_channels()
            )));
        }
        Ok(x)
    } else {
        Ok(align_trials(load_all_trials(m)?, layout)?.0)
    }
}

fn load_ckpt(path: &Path, task: Task) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.layout.task() != task {
        return Err(Error::TemplateMismatch(format!(
            "checkpoint {} is for task {}, command expects {}",
            path.display(),
            ck.layout.task(),
            task
        )));
    }
    Ok(ck)
}

fn cmd_train(a: TrainArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg = a.cfg.resolve(a.task, threads, Vec::new())?;
    let mut layout = None;
    let mut inputs = Vec::new();
    let mut class_names: Option<Vec<String>> = None;
    for p in &a.data {
        let m = load(p)?;
        check_task(&m, a.task)?;
        let (l, mut x) = load_template_inputs(&m)?;
        match &layout {
            None => layout = Some(l),
            Some(first) if *first != l => {
                return Err(Error::TemplateMismatch(format!("dataset {} was aligned with a different layout", m.name)))
            }
            Some(_) => {}
        }
        match &class_names {
            None => class_names = Some(m.class_names.clone()),
            Some(c) if *c != m.class_names => {
                return Err(Error::data(format!("{}.class_names", m.name), "class names differ between datasets"))
            }
            Some(_) => {}
        }
        inputs.append(&mut x);
    }
    let layout = layout.expect("at least one dataset");
    cfg.model.n_channels = layout.n_channels();
    cfg.model.template_len = layout.template_len();
    cfg.validate()?;
    cfg.echo(&sibling(&a.out, ".config.json"))?;
    let start = Checkpoint::init(cfg.model.clone(), layout, class_names.unwrap_or_default(), cfg.train.seed)?;
    let outcome = train(&inputs, start, &cfg.train)?;
    write_loss_csv(&outcome.history, &sibling(&a.out, ".loss.csv"))?;
    if let Some(step) = outcome.diverged_at {
        return Err(Error::numeric(format!("training diverged at step {step}; no checkpoint written")));
    }
    outcome.checkpoint.save(&a.out)?;
    info!("saved checkpoint to {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = load_ckpt(&data_path(&a.ckpt), a.task)?;
    let opts = crate::eval::EvalOptions { folds: a.folds, repeats: a.repeats, seed: a.seed };
    let mut reports = Vec::new();
    for p in &a.data {
        let m = load(p)?;
        let x = inputs_for(&m, &ck.layout)?;
        let r = evaluate(&ck, &ck.layout, &x, &m.name, &opts)?;
        print!("{}", r.to_table());
        reports.push(r);
    }
    if let Some(out) = &a.out {
        write_json(out, &reports)?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs, threads: Option<usize>) -> Result<()> {
    let cfg = a.cfg.resolve(a.task, threads, Vec::new())?;
    let raw = |ps: &[PathBuf]| -> Result<Vec<RawDataset>> {
        ps.iter()
            .map(|p| {
                let m = load(p)?;
                check_task(&m, a.task)?;
                RawDataset::load(&m)
            })
            .collect()
    };
    let train_sets = raw(&a.train)?;
    let eval_sets = raw(&a.eval)?;
    let plan = AblationPlan {
        variants: parse_variants(&a.variants)?,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        eval: cfg.eval,
        seed: cfg.train.seed,
    };
    cfg.echo(&a.out.join("config.json"))?;
    let table = run_ablation(&plan, &train_sets, &eval_sets)?;
    let csv = table.to_csv();
    let path = a.out.join("ablation.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    write_json(&a.out.join("ablation.json"), &table)?;
    print!("{csv}");
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs, threads: Option<usize>) -> Result<()> {
    let ck = Checkpoint::load(&data_path(&a.ckpt))?;
    let task = ck.layout.task();
    let mut extra: Overrides = Vec::new();
    if let Some(f) = a.fraction {
        extra.push(("finetune.fraction", json!(f)));
    }
    let mut cfg = a.cfg.resolve(task, threads, extra)?;
    cfg.model = ck.model.clone();
    cfg.validate()?;
    let m = load(&a.data)?;
    let x = inputs_for(&m, &ck.layout)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    cfg.echo(&a.out.join("config.json"))?;
    let (models, report) = finetune_and_evaluate(&ck, &ck.layout, &x, &m.name, cfg.finetune.fraction, &cfg.train)?;
    for sm in &models {
        let stem: String = sm.subject.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
        write_loss_csv(&sm.outcome.history, &a.out.join(format!("{stem}.loss.csv")))?;
        sm.outcome.checkpoint.save(&a.out.join(format!("{stem}.ckpt")))?;
    }
    write_json(&a.out.join("report.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}
