//! Command-line operations over the library: demo generation, pretraining,
//! finetuning, evaluation, the cloning baseline, reports, and multi-stage
//! manifests. Exit codes are part of the interface: 0 on success, 2 for a
//! usage or configuration problem, 3 when a run halts on a numerical
//! failure, 4 for an I/O error. Every artifact written here carries the
//! manifest hash (or "none" for direct invocations), the seed, and the full
//! configuration, so a result file always identifies the run that made it.
//!
//! Commands read their inputs completely before writing anything, and every
//! output goes to a path named by the caller; no command rewrites a dataset
//! or checkpoint it was given.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bc::{bc_train, BcMode, BcPolicy};
use crate::dataset::{load_jsonl, save_jsonl, DatasetError};
use crate::env::{generate_demos, DomainGap, EnvError, Task, TaskSpec};
use crate::model::checkpoint::{
    checkpoint_hash, checkpoint_kind, load_policy, load_world_model, save_policy,
    save_world_model, CheckpointError,
};
use crate::model::planner::ActMode;
use crate::model::WorldModel;
use crate::report::{
    coverage, AblationReport, DegradationReport, DegradationRow, SuccessRow, TransferReport,
};
use crate::sft::MleRun;
use crate::trainer::{self, ConfigError, EvalOutcome, Provenance, TrainConfig, TrainError};

#[derive(Parser, Debug)]
#[command(
    name = "cdred-wm",
    version,
    about = "Latent world-model pretraining and finetuning on 2-D manipulation tasks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Roll the scripted expert and save its episodes as a JSONL dataset.
    GenDemos(GenDemosArgs),
    /// Online pretraining against an environment, driven by a config file.
    Pretrain(PretrainArgs),
    /// Supervised finetuning of a pretrained checkpoint on a demo dataset.
    Finetune(FinetuneArgs),
    /// Roll evaluation episodes from a checkpoint and print a JSON summary.
    Eval(EvalArgs),
    /// Train the behavior-cloning baseline on demo datasets.
    Bc(BcArgs),
    /// Build a text and CSV report from datasets or eval summaries.
    Report(ReportArgs),
    /// Run the stages of an experiment manifest under one recorded hash.
    Manifest(ManifestArgs),
}

/// Failures grouped by what the caller did wrong, mirrored in exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, malformed inputs, rejected configuration. Exit 2.
    #[error("{0}")]
    Usage(String),
    /// A training run halted on a non-finite loss. Exit 3.
    #[error("{0}")]
    Numerical(String),
    /// The filesystem got in the way. Exit 4.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NumericalFailure { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            CheckpointError::Format { .. } => CliError::Usage(e.to_string()),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenDemos(a) => cmd_gen_demos(a, None),
        Command::Pretrain(a) => cmd_pretrain(a, None),
        Command::Finetune(a) => cmd_finetune(a, None),
        Command::Eval(a) => cmd_eval(a, None),
        Command::Bc(a) => cmd_bc(a, None),
        Command::Report(a) => cmd_report(a, None),
        Command::Manifest(a) => cmd_manifest(a),
    }
}

fn parse_task_arg(s: &str) -> Result<Task, String> {
    Task::parse(s).ok_or_else(|| format!("unknown task '{s}': expected reach, push, or insert"))
}

fn gap_preset(name: &str) -> Result<DomainGap, CliError> {
    match name {
        "none" => Ok(DomainGap::identity()),
        "pose" => Ok(DomainGap::pose()),
        "kinematics" => Ok(DomainGap::kinematics()),
        "both" => Ok(DomainGap::both()),
        other => Err(CliError::Usage(format!(
            "unknown gap preset '{other}': expected none, pose, kinematics, or both"
        ))),
    }
}

fn eval_mode(name: &str) -> Result<ActMode, CliError> {
    match name {
        "planner" => Ok(ActMode::Plan),
        other => ActMode::parse(other).ok_or_else(|| {
            CliError::Usage(format!("unknown mode '{other}': expected policy or planner"))
        }),
    }
}

fn mode_label(mode: ActMode) -> &'static str {
    match mode {
        ActMode::Policy => "policy",
        ActMode::Plan => "planner",
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn provenance(cfg: &TrainConfig, manifest_hash: Option<&str>) -> Provenance {
    match manifest_hash {
        Some(h) => Provenance::under_manifest(cfg, h),
        None => Provenance::local(cfg),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("write {}: {e}", path.display())))
}

fn make_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("create {}: {e}", path.display())))
}

fn make_parent_dir(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => make_dir(dir),
        _ => Ok(()),
    }
}

/// Sidecar path for an artifact: `demos.jsonl` gets `demos.jsonl.meta.json`.
fn meta_path(artifact: &Path) -> PathBuf {
    PathBuf::from(format!("{}.meta.json", artifact.display()))
}

fn pretty_json(value: &serde_json::Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    text
}

/// The config snapshot written into a workdir. Reloading it reproduces the
/// run: comments are legal TOML, so `TrainConfig::load` accepts the file.
fn config_snapshot(prov: &Provenance) -> String {
    format!("# manifest_hash = {}\n{}", prov.manifest_hash, prov.config_toml)
}

fn write_checkpoint_meta(ckpt: &Path, prov: &Provenance) -> Result<(), CliError> {
    let meta = serde_json::json!({
        "checkpoint_hash": checkpoint_hash(ckpt)?,
        "manifest_hash": prov.manifest_hash,
        "seed": prov.seed,
        "config_toml": prov.config_toml,
    });
    write_text(&meta_path(ckpt), &pretty_json(&meta))
}

fn loss_csv(prov: &Provenance, runs: &[(&str, &MleRun)]) -> String {
    let mut out = prov.comment_block();
    out.push_str("phase,step,loss\n");
    for (name, run) in runs {
        for &(step, loss) in &run.history {
            out.push_str(&format!("{name},{step},{loss}\n"));
        }
    }
    out
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDemosArgs {
    /// Task: reach, push, or insert.
    #[arg(long, value_parser = parse_task_arg)]
    pub task: Task,
    /// Domain gap preset the expert acts under: none, pose, kinematics, both.
    #[arg(long, default_value = "none")]
    #[serde(default = "default_gap_name")]
    pub gap: String,
    /// Number of successful episodes to keep.
    #[arg(long, default_value_t = 100)]
    #[serde(default = "default_demo_count")]
    pub n: usize,
    /// Standard deviation of the Gaussian noise added to expert actions.
    #[arg(long, default_value_t = 0.05)]
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub seed: u64,
    /// Output dataset path (JSONL, one transition per line).
    #[arg(long)]
    pub out: PathBuf,
}

fn default_gap_name() -> String {
    "none".to_string()
}

fn default_demo_count() -> usize {
    100
}

fn default_sigma() -> f64 {
    0.05
}

pub fn cmd_gen_demos(args: &GenDemosArgs, manifest_hash: Option<&str>) -> Result<(), CliError> {
    let gap = gap_preset(&args.gap)?;
    let spec = TaskSpec::new(args.task);
    let (episodes, stats) = generate_demos(&spec, &gap, args.n, args.sigma, args.seed)?;
    make_parent_dir(&args.out)?;
    save_jsonl(&args.out, &episodes)?;
    let meta = serde_json::json!({
        "task": args.task,
        "gap": args.gap,
        "pose_bias": gap.pose_bias,
        "action_gain": gap.action_gain,
        "episodes": stats.episodes,
        "transitions": stats.transitions,
        "attempts": stats.attempts,
        "probe_success_rate": stats.probe_success_rate,
        "mean_length": stats.mean_length,
        "sigma": args.sigma,
        "seed": args.seed,
        "manifest_hash": manifest_hash.unwrap_or("none"),
    });
    write_text(&meta_path(&args.out), &pretty_json(&meta))?;
    println!(
        "wrote {} episodes ({} transitions, mean length {:.1}) to {}",
        stats.episodes,
        stats.transitions,
        stats.mean_length,
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainArgs {
    /// Flat key = value config file; unknown keys are rejected.
    #[arg(long)]
    pub config: PathBuf,
    /// Expert demonstration dataset (JSONL).
    #[arg(long)]
    pub demos: PathBuf,
    /// Output directory: config.toml, metrics.csv, rollouts.jsonl, model.ckpt.
    #[arg(long)]
    pub workdir: PathBuf,
}

pub fn cmd_pretrain(args: &PretrainArgs, manifest_hash: Option<&str>) -> Result<(), CliError> {
    let cfg = TrainConfig::load(&args.config)?;
    let demos = load_jsonl(&args.demos)?;
    make_dir(&args.workdir)?;
    let spec = TaskSpec::new(cfg.task);
    let outcome = trainer::pretrain(&spec, &cfg.domain_gap(), &demos, &cfg)?;

    // Artifacts land even when the run halted: metrics up to the failure and
    // the last checkpoint from before it are exactly what a postmortem needs.
    let prov = provenance(&cfg, manifest_hash);
    write_text(&args.workdir.join("config.toml"), &config_snapshot(&prov))?;
    let metrics_path = args.workdir.join("metrics.csv");
    outcome
        .metrics
        .write_csv(&metrics_path, &prov)
        .map_err(|e| CliError::Io(format!("write {}: {e}", metrics_path.display())))?;
    save_jsonl(&args.workdir.join("rollouts.jsonl"), &outcome.rollouts)?;
    let ckpt = args.workdir.join("model.ckpt");
    save_world_model(&ckpt, &outcome.model)?;
    write_checkpoint_meta(&ckpt, &prov)?;

    match outcome.metrics.rows.last() {
        Some(last) => println!(
            "pretrained {} for {} env steps, {} updates (model loss {:.4})",
            cfg.task, last.env_steps, last.update, last.model_loss
        ),
        None => println!("pretrained {} with no gradient updates", cfg.task),
    }
    println!("checkpoint: {}", ckpt.display());
    match outcome.halt {
        Some(halt) => Err(CliError::Numerical(format!(
            "{} at update {}; kept the last checkpoint from before the failure",
            halt.context, halt.update
        ))),
        None => Ok(()),
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneArgs {
    /// Flat key = value config file; unknown keys are rejected.
    #[arg(long)]
    pub config: PathBuf,
    /// Pretrained world-model checkpoint to start from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// New-domain demonstration dataset (JSONL).
    #[arg(long)]
    pub demos: PathBuf,
    /// Output directory: config.toml, finetune_loss.csv, finetuned.ckpt.
    #[arg(long)]
    pub workdir: PathBuf,
}

pub fn cmd_finetune(args: &FinetuneArgs, manifest_hash: Option<&str>) -> Result<(), CliError> {
    let cfg = TrainConfig::load(&args.config)?;
    let model = load_world_model(&args.checkpoint)?;
    let demos = load_jsonl(&args.demos)?;
    make_dir(&args.workdir)?;
    let outcome = trainer::finetune(model, &demos, &cfg)?;

    let prov = provenance(&cfg, manifest_hash);
    write_text(&args.workdir.join("config.toml"), &config_snapshot(&prov))?;
    write_text(
        &args.workdir.join("finetune_loss.csv"),
        &loss_csv(&prov, &[("finetune", &outcome.run)]),
    )?;
    let ckpt = args.workdir.join("finetuned.ckpt");
    save_world_model(&ckpt, &outcome.model)?;
    write_checkpoint_meta(&ckpt, &prov)?;

    match outcome.run.final_loss() {
        Some(loss) => println!(
            "finetuned {} for {} steps (final loss {:.4})",
            cfg.task, cfg.finetune_steps, loss
        ),
        None => println!("finetune ran no steps; parameters are unchanged"),
    }
    println!("checkpoint: {}", ckpt.display());
    match outcome.halt {
        Some(halt) => Err(CliError::Numerical(format!(
            "{} at update {}; checkpoint keeps the pre-finetune parameters",
            halt.context, halt.update
        ))),
        None => Ok(()),
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// World-model or baseline checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Domain gap preset the episodes run under.
    #[arg(long, default_value = "none")]
    #[serde(default = "default_gap_name")]
    pub gap: String,
    /// Actor mode: policy, or planner (world models only). Defaults to the
    /// config's eval mode for world models and to policy for the baseline.
    #[arg(long)]
    #[serde(default)]
    pub mode: Option<String>,
    /// Episode count; defaults to the config's eval_episodes.
    #[arg(long)]
    #[serde(default)]
    pub episodes: Option<usize>,
    /// Evaluation seed; defaults to the config's seed.
    #[arg(long)]
    #[serde(default)]
    pub seed: Option<u64>,
    /// Config supplying defaults; omitted, the task's stock config is used.
    #[arg(long)]
    #[serde(default)]
    pub config: Option<PathBuf>,
    /// Also write the JSON summary to this path.
    #[arg(long)]
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// Everything `eval` reports, as pretty JSON on stdout and in `--out`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task: String,
    pub mode: String,
    pub gap: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub manifest_hash: String,
    pub episode_successes: Vec<bool>,
    pub config: TrainConfig,
}

enum Actor {
    World(Box<WorldModel>),
    Baseline(BcPolicy),
}

fn eval_config(args: &EvalArgs, task: Task) -> Result<TrainConfig, CliError> {
    match &args.config {
        Some(path) => {
            let cfg = TrainConfig::load(path)?;
            if cfg.task != task {
                return Err(CliError::Usage(format!(
                    "config is for {}, checkpoint is for {task}",
                    cfg.task
                )));
            }
            Ok(cfg)
        }
        None => Ok(TrainConfig::for_task(task)),
    }
}

pub fn cmd_eval(args: &EvalArgs, manifest_hash: Option<&str>) -> Result<(), CliError> {
    let gap = gap_preset(&args.gap)?;
    let actor = match checkpoint_kind(&args.checkpoint)?.as_str() {
        "world_model" => Actor::World(Box::new(load_world_model(&args.checkpoint)?)),
        "bc" => Actor::Baseline(load_policy(&args.checkpoint)?),
        other => {
            return Err(CliError::Usage(format!(
                "{}: unknown checkpoint kind '{other}'",
                args.checkpoint.display()
            )))
        }
    };
    let task = match &actor {
        Actor::World(m) => m.cfg.task,
        Actor::Baseline(b) => b.cfg.task,
    };
    let cfg = eval_config(args, task)?;
    let episodes = args.episodes.unwrap_or(cfg.eval_episodes);
    if episodes == 0 {
        return Err(CliError::Usage("evaluation needs at least one episode".to_string()));
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let spec = TaskSpec::new(task);

    let (outcome, mode_name): (EvalOutcome, &str) = match &actor {
        Actor::World(model) => {
            let mode = match &args.mode {
                Some(m) => eval_mode(m)?,
                None => cfg.eval_mode,
            };
            let outcome = trainer::evaluate(
                model,
                &spec,
                &gap,
                episodes,
                seed,
                mode,
                &cfg.planner_config(),
                cfg.lambda,
            );
            (outcome, mode_label(mode))
        }
        Actor::Baseline(bc) => {
            if let Some(m) = &args.mode {
                if eval_mode(m)? != ActMode::Policy {
                    return Err(CliError::Usage(
                        "bc checkpoints have no dynamics to plan with; use --mode policy"
                            .to_string(),
                    ));
                }
            }
            (trainer::evaluate_bc(bc, &spec, &gap, episodes, seed), "policy")
        }
    };

    let summary = EvalSummary {
        task: task.to_string(),
        mode: mode_name.to_string(),
        gap: args.gap.clone(),
        episodes: outcome.episodes,
        successes: outcome.successes,
        success_rate: outcome.success_rate,
        mean_steps: outcome.mean_steps(),
        seed,
        checkpoint_hash: checkpoint_hash(&args.checkpoint)?,
        manifest_hash: manifest_hash.unwrap_or("none").to_string(),
        episode_successes: outcome.episode_successes,
        config: cfg,
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    print!("{json}");
    if let Some(out) = &args.out {
        make_parent_dir(out)?;
        write_text(out, &json)?;
    }
    Ok(())
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcArgs {
    /// Flat key = value config file; unknown keys are rejected.
    #[arg(long)]
    pub config: PathBuf,
    /// direct trains on --demos alone; pf pretrains on --source-demos and
    /// then finetunes on --demos.
    #[arg(long)]
    pub mode: String,
    /// Target-domain demonstration dataset (JSONL).
    #[arg(long)]
    pub demos: PathBuf,
    /// Source-domain demonstrations for the pf pretraining phase.
    #[arg(long)]
    #[serde(default)]
    pub source_demos: Option<PathBuf>,
    /// Output directory: config.toml, bc_loss.csv, bc.ckpt.
    #[arg(long)]
    pub workdir: PathBuf,
}

pub fn cmd_bc(args: &BcArgs, manifest_hash: Option<&str>) -> Result<(), CliError> {
    let cfg = TrainConfig::load(&args.config)?;
    let mode = BcMode::parse(&args.mode).ok_or_else(|| {
        CliError::Usage(format!("unknown bc mode '{}': expected direct or pf", args.mode))
    })?;
    match (mode, &args.source_demos) {
        (BcMode::PretrainFinetune, None) => {
            return Err(CliError::Usage(
                "pf mode pretrains on a source dataset: pass --source-demos".to_string(),
            ))
        }
        (BcMode::Direct, Some(_)) => {
            return Err(CliError::Usage(
                "direct mode trains on --demos alone; drop --source-demos".to_string(),
            ))
        }
        _ => {}
    }
    let target = load_jsonl(&args.demos)?;
    let source = match &args.source_demos {
        Some(path) => Some(load_jsonl(path)?),
        None => None,
    };
    make_dir(&args.workdir)?;
    let out = bc_train(cfg.bc_config(), mode, source.as_deref(), &target, &cfg.bc_setup())?;

    let prov = provenance(&cfg, manifest_hash);
    write_text(&args.workdir.join("config.toml"), &config_snapshot(&prov))?;
    let labels: &[&str] = match mode {
        BcMode::Direct => &["direct"],
        BcMode::PretrainFinetune => &["pretrain", "finetune"],
    };
    let labeled: Vec<(&str, &MleRun)> =
        labels.iter().copied().zip(out.runs.iter()).collect();
    write_text(&args.workdir.join("bc_loss.csv"), &loss_csv(&prov, &labeled))?;
    let ckpt = args.workdir.join("bc.ckpt");
    save_policy(&ckpt, &out.policy)?;
    write_checkpoint_meta(&ckpt, &prov)?;

    let final_loss = out.runs.last().and_then(MleRun::final_loss);
    match final_loss {
        Some(loss) => {
            println!("trained bc ({}) on {} (final loss {:.4})", mode.name(), cfg.task, loss)
        }
        None => println!("trained bc ({}) on {} with no steps", mode.name(), cfg.task),
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportArgs {
    /// Report kind: coverage, transfer, degradation, or ablation.
    #[arg(long)]
    pub kind: String,
    /// Output path prefix; writes <prefix>.txt and <prefix>.csv, and for
    /// coverage also <prefix>_hist.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Histogram bins per state dimension (coverage only).
    #[arg(long, default_value_t = 30)]
    #[serde(default = "default_report_bins")]
    pub bins: usize,
    /// Inputs as key=value pairs. coverage: expert=<dataset>
    /// behavioral=<dataset>. transfer: <label>=<eval json>. degradation:
    /// <label>=<original eval json>:<finetuned eval json>. ablation:
    /// <demo count>=<eval json>.
    #[arg(required = true, value_name = "KEY=PATH")]
    pub inputs: Vec<String>,
}

fn default_report_bins() -> usize {
    30
}

pub fn cmd_report(args: &ReportArgs, manifest_hash: Option<&str>) -> Result<(), CliError> {
    let inputs = parse_inputs(&args.inputs)?;
    let (text, csv, hist) = match args.kind.as_str() {
        "coverage" => report_coverage(&inputs, args.bins)?,
        "transfer" => report_transfer(&inputs)?,
        "degradation" => report_degradation(&inputs)?,
        "ablation" => report_ablation(&inputs)?,
        other => {
            return Err(CliError::Usage(format!(
                "unknown report kind '{other}': expected coverage, transfer, degradation, \
                 or ablation"
            )))
        }
    };
    let header = report_header(&inputs, manifest_hash);
    let prefix = args.out.display();
    let txt_path = PathBuf::from(format!("{prefix}.txt"));
    let csv_path = PathBuf::from(format!("{prefix}.csv"));
    make_parent_dir(&txt_path)?;
    write_text(&txt_path, &format!("{header}{text}"))?;
    write_text(&csv_path, &format!("{header}{csv}"))?;
    if let Some(hist) = hist {
        write_text(&PathBuf::from(format!("{prefix}_hist.csv")), &format!("{header}{hist}"))?;
    }
    println!("wrote {} and {}", txt_path.display(), csv_path.display());
    Ok(())
}

fn parse_inputs(raw: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut inputs = Vec::with_capacity(raw.len());
    for item in raw {
        let (key, value) = item
            .split_once('=')
            .filter(|(k, v)| !k.is_empty() && !v.is_empty())
            .ok_or_else(|| CliError::Usage(format!("report input '{item}' is not key=path")))?;
        if inputs.iter().any(|(k, _)| k == key) {
            return Err(CliError::Usage(format!("duplicate report input key '{key}'")));
        }
        inputs.push((key.to_string(), value.to_string()));
    }
    Ok(inputs)
}

fn report_header(inputs: &[(String, String)], manifest_hash: Option<&str>) -> String {
    let mut out = format!("# manifest_hash = {}\n", manifest_hash.unwrap_or("none"));
    for (key, value) in inputs {
        out.push_str(&format!("# input {key} = {value}\n"));
    }
    out
}

fn require_input<'a>(
    inputs: &'a [(String, String)],
    key: &str,
    kind: &str,
) -> Result<&'a str, CliError> {
    inputs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| CliError::Usage(format!("{kind} reports need an input '{key}=<path>'")))
}

type ReportBodies = (String, String, Option<String>);

fn report_coverage(inputs: &[(String, String)], bins: usize) -> Result<ReportBodies, CliError> {
    if bins == 0 {
        return Err(CliError::Usage("coverage needs at least one bin".to_string()));
    }
    if inputs.len() != 2 {
        return Err(CliError::Usage(
            "coverage takes exactly two inputs, expert=<dataset> and behavioral=<dataset>"
                .to_string(),
        ));
    }
    let expert = load_jsonl(Path::new(require_input(inputs, "expert", "coverage")?))?;
    let behavioral = load_jsonl(Path::new(require_input(inputs, "behavioral", "coverage")?))?;
    let expert_width = expert[0].transitions[0].state.len();
    let behavioral_width = behavioral[0].transitions[0].state.len();
    if expert_width != behavioral_width {
        return Err(CliError::Usage(format!(
            "datasets have different state widths ({expert_width} vs {behavioral_width}); \
             are they from the same task?"
        )));
    }
    let report = coverage(&expert, &behavioral, bins);
    Ok((report.to_text(), report.to_csv(), Some(report.histogram_csv())))
}

fn read_eval_summary(path: &Path) -> Result<EvalSummary, CliError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Usage(format!("{}: not an eval summary: {e}", path.display()))
    })
}

fn report_transfer(inputs: &[(String, String)]) -> Result<ReportBodies, CliError> {
    let mut rows = Vec::with_capacity(inputs.len());
    for (label, path) in inputs {
        let summary = read_eval_summary(Path::new(path))?;
        rows.push(SuccessRow {
            label: label.clone(),
            success_rate: summary.success_rate,
            episodes: summary.episodes,
        });
    }
    let report = TransferReport { rows };
    Ok((report.to_text(), report.to_csv(), None))
}

fn report_degradation(inputs: &[(String, String)]) -> Result<ReportBodies, CliError> {
    let mut rows = Vec::with_capacity(inputs.len());
    for (label, pair) in inputs {
        let (original, finetuned) = pair.split_once(':').ok_or_else(|| {
            CliError::Usage(format!(
                "degradation input '{label}={pair}' wants two eval summaries as \
                 <original>:<finetuned>"
            ))
        })?;
        rows.push(DegradationRow {
            label: label.clone(),
            original: read_eval_summary(Path::new(original))?.success_rate,
            finetuned: read_eval_summary(Path::new(finetuned))?.success_rate,
        });
    }
    let report = DegradationReport { rows };
    Ok((report.to_text(), report.to_csv(), None))
}

fn report_ablation(inputs: &[(String, String)]) -> Result<ReportBodies, CliError> {
    let mut rows = Vec::with_capacity(inputs.len());
    for (count, path) in inputs {
        let demos: usize = count.parse().map_err(|_| {
            CliError::Usage(format!("ablation input keys are demo counts, got '{count}'"))
        })?;
        rows.push((demos, read_eval_summary(Path::new(path))?.success_rate));
    }
    let report = AblationReport::new(rows);
    Ok((report.to_text(), report.to_csv(), None))
}

#[derive(Args, Clone, Debug)]
pub struct ManifestArgs {
    /// Manifest TOML file: a workdir plus [[stage]] entries.
    pub manifest: PathBuf,
}

/// A multi-stage experiment. Stages run in order; every stage's outputs
/// record the SHA-256 of the manifest text, so artifacts can be traced back
/// to the exact file that produced them. Relative paths inside stages
/// resolve against the manifest's workdir.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    /// Directory all stage paths resolve into, relative to the manifest file.
    pub workdir: PathBuf,
    #[serde(rename = "stage", default)]
    pub stages: Vec<Stage>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Stage {
    GenDemos(GenDemosArgs),
    Pretrain(PretrainArgs),
    Finetune(FinetuneArgs),
    Eval(EvalArgs),
    Bc(BcArgs),
    Report(ReportArgs),
}

impl Stage {
    fn name(&self) -> &'static str {
        match self {
            Stage::GenDemos(_) => "gen-demos",
            Stage::Pretrain(_) => "pretrain",
            Stage::Finetune(_) => "finetune",
            Stage::Eval(_) => "eval",
            Stage::Bc(_) => "bc",
            Stage::Report(_) => "report",
        }
    }
}

fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

fn run_stage(stage: &Stage, root: &Path, hash: &str) -> Result<(), CliError> {
    let hash = Some(hash);
    match stage {
        Stage::GenDemos(args) => {
            let mut args = args.clone();
            args.out = resolve(root, &args.out);
            cmd_gen_demos(&args, hash)
        }
        Stage::Pretrain(args) => {
            let mut args = args.clone();
            args.config = resolve(root, &args.config);
            args.demos = resolve(root, &args.demos);
            args.workdir = resolve(root, &args.workdir);
            cmd_pretrain(&args, hash)
        }
        Stage::Finetune(args) => {
            let mut args = args.clone();
            args.config = resolve(root, &args.config);
            args.checkpoint = resolve(root, &args.checkpoint);
            args.demos = resolve(root, &args.demos);
            args.workdir = resolve(root, &args.workdir);
            cmd_finetune(&args, hash)
        }
        Stage::Eval(args) => {
            let mut args = args.clone();
            args.checkpoint = resolve(root, &args.checkpoint);
            args.config = args.config.take().map(|p| resolve(root, &p));
            args.out = args.out.take().map(|p| resolve(root, &p));
            cmd_eval(&args, hash)
        }
        Stage::Bc(args) => {
            let mut args = args.clone();
            args.config = resolve(root, &args.config);
            args.demos = resolve(root, &args.demos);
            args.source_demos = args.source_demos.take().map(|p| resolve(root, &p));
            args.workdir = resolve(root, &args.workdir);
            cmd_bc(&args, hash)
        }
        Stage::Report(args) => {
            let mut args = args.clone();
            args.out = resolve(root, &args.out);
            args.inputs = args
                .inputs
                .iter()
                .map(|item| match item.split_once('=') {
                    Some((key, value)) => {
                        let resolved: Vec<String> = value
                            .split(':')
                            .map(|part| resolve(root, Path::new(part)).display().to_string())
                            .collect();
                        format!("{key}={}", resolved.join(":"))
                    }
                    None => item.clone(),
                })
                .collect();
            cmd_report(&args, hash)
        }
    }
}

pub fn cmd_manifest(args: &ManifestArgs) -> Result<(), CliError> {
    let text = read_text(&args.manifest)?;
    let manifest: ExperimentManifest = toml::from_str(&text).map_err(|e| {
        CliError::Usage(format!("parse {}: {e}", args.manifest.display()))
    })?;
    if manifest.stages.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: manifest has no stages",
            args.manifest.display()
        )));
    }
    let hash = sha256_hex(text.as_bytes());
    let manifest_dir = match args.manifest.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let root = manifest_dir.join(&manifest.workdir);
    make_dir(&root)?;
    println!(
        "manifest {}: {} stages, hash {}",
        args.manifest.display(),
        manifest.stages.len(),
        &hash[..12]
    );
    for (i, stage) in manifest.stages.iter().enumerate() {
        println!("stage {i}: {}", stage.name());
        run_stage(stage, &root, &hash).map_err(|e| {
            let message = format!("stage {i} ({}): {e}", stage.name());
            match e {
                CliError::Usage(_) => CliError::Usage(message),
                CliError::Numerical(_) => CliError::Numerical(message),
                CliError::Io(_) => CliError::Io(message),
            }
        })?;
    }
    println!("manifest complete: outputs under {}", root.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_presets_cover_the_four_names() {
        assert!(gap_preset("none").unwrap().is_identity());
        assert_eq!(gap_preset("pose").unwrap().pose_bias, [0.03, 0.03]);
        assert_eq!(gap_preset("kinematics").unwrap().action_gain, 0.85);
        let both = gap_preset("both").unwrap();
        assert!(both.pose_bias != [0.0, 0.0] && both.action_gain != 1.0);
        assert!(matches!(gap_preset("sim2real"), Err(CliError::Usage(_))));
    }

    #[test]
    fn eval_mode_accepts_planner_as_an_alias() {
        assert_eq!(eval_mode("planner").unwrap(), ActMode::Plan);
        assert_eq!(eval_mode("plan").unwrap(), ActMode::Plan);
        assert_eq!(eval_mode("policy").unwrap(), ActMode::Policy);
        assert!(eval_mode("random").is_err());
    }

    #[test]
    fn report_inputs_must_be_unique_key_value_pairs() {
        let parsed = parse_inputs(&["a=x.json".into(), "b=y.json".into()]).unwrap();
        assert_eq!(parsed[1], ("b".to_string(), "y.json".to_string()));
        assert!(parse_inputs(&["missing_equals".into()]).is_err());
        assert!(parse_inputs(&["=x".into()]).is_err());
        assert!(parse_inputs(&["a=x".into(), "a=y".into()]).is_err());
    }

    #[test]
    fn manifest_stages_parse_from_kind_tagged_tables() {
        let text = r#"
            workdir = "out"

            [[stage]]
            kind = "gen-demos"
            task = "reach"
            out = "demos.jsonl"

            [[stage]]
            kind = "pretrain"
            config = "run.toml"
            demos = "demos.jsonl"
            workdir = "pretrain"

            [[stage]]
            kind = "eval"
            checkpoint = "pretrain/model.ckpt"
            mode = "planner"
            out = "eval.json"
        "#;
        let manifest: ExperimentManifest = toml::from_str(text).unwrap();
        assert_eq!(manifest.stages.len(), 3);
        assert_eq!(manifest.stages[0].name(), "gen-demos");
        match &manifest.stages[0] {
            Stage::GenDemos(args) => {
                // unspecified knobs fall back to the CLI defaults
                assert_eq!(args.n, 100);
                assert_eq!(args.gap, "none");
            }
            other => panic!("expected gen-demos, got {}", other.name()),
        }
        match &manifest.stages[2] {
            Stage::Eval(args) => assert_eq!(args.mode.as_deref(), Some("planner")),
            other => panic!("expected eval, got {}", other.name()),
        }
    }

    #[test]
    fn manifest_rejects_unknown_stage_fields() {
        let text = r#"
            workdir = "out"

            [[stage]]
            kind = "gen-demos"
            task = "reach"
            out = "demos.jsonl"
            episodes = 10
        "#;
        let err = toml::from_str::<ExperimentManifest>(text).unwrap_err();
        assert!(err.to_string().contains("episodes"), "unhelpful error: {err}");
    }

    #[test]
    fn exit_codes_separate_usage_numerics_and_io() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 2);
        assert_eq!(CliError::Numerical(String::new()).exit_code(), 3);
        assert_eq!(CliError::Io(String::new()).exit_code(), 4);
    }
}
