//! The `pal` command line. Each subcommand is one pipeline stage reading and
//! writing the engine's file formats, so stages can be swapped for external
//! tools.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 internal error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pal_core::engine::{run_round, update_pools, RoundInputs, RoundState};
use pal_core::io::records::{load_matched, write_matched, write_scores, InstanceScoreLine, MatchedPool};
use pal_core::io::{
    load_config, load_detection_dump, load_embeddings, load_ground_truth, load_proposals, write_selection_manifest,
};
use pal_core::lius::{ClassifierBank, ModelSource};
use pal_core::matching::match_pool;
use pal_core::simulator::{
    generate_world, load_simulation_settings, render_report, run_campaigns_with_output, CampaignReport,
    SimulationSettings, Strategy,
};
use pal_core::{PalError, SelectionConfig};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pal", version, about = "Active-learning image selection from detector outputs")]
pub struct Cli {
    /// Print progress to stderr (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Attach pre-NMS proposal counts (and TP/FP labels given ground truth)
    /// to a pool's detections.
    Match(MatchArgs),
    /// Train the per-class TP/FP classifiers on a matched labelled pool.
    TrainClc(TrainArgs),
    /// Score unlabelled detections with trained classifiers.
    Score(ScoreArgs),
    /// Select the next batch of images to annotate.
    Select(SelectArgs),
    /// Run simulated multi-round campaigns.
    Simulate(SimulateArgs),
    /// Render a campaign report as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Selection config (TOML, or JSON for `.json` files). Defaults apply
    /// when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Detection file (`pal.detections`).
    #[arg(long)]
    pub detections: PathBuf,
    /// Proposal file (`pal.proposals`); optional when the detection file
    /// carries proposal records itself.
    #[arg(long)]
    pub proposals: Option<PathBuf>,
    /// Ground truth; given for the labelled pool to add TP/FP labels.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output matched file (`pal.matched`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Matched labelled pool with TP/FP labels.
    #[arg(long)]
    pub labelled: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output classifier bank (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Matched unlabelled pool.
    #[arg(long)]
    pub unlabelled: PathBuf,
    /// Classifier bank written by `train-clc`.
    #[arg(long, conflicts_with = "labelled", required_unless_present = "labelled")]
    pub models: Option<PathBuf>,
    /// Matched labelled pool to train classifiers from on the fly.
    #[arg(long)]
    pub labelled: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output score file (`pal.scores`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Matched labelled pool with TP/FP labels.
    #[arg(long)]
    pub labelled: PathBuf,
    /// Matched unlabelled pool.
    #[arg(long)]
    pub unlabelled: PathBuf,
    /// Image embeddings (`PALEMB1`).
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
    /// Round state (JSON). Without it the pools are the images listed in the
    /// two matched files and the round is 1.
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Images to select this round; overrides the config and state.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Recorded in the state; selection itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output manifest (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the state after the pool update.
    #[arg(long)]
    pub state_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Pal,
    Random,
    Entropy,
    All,
}

impl StrategyArg {
    fn strategies(self) -> Vec<Strategy> {
        match self {
            StrategyArg::Pal => vec![Strategy::Pal],
            StrategyArg::Random => vec![Strategy::Random],
            StrategyArg::Entropy => vec![Strategy::Entropy],
            StrategyArg::All => Strategy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Config whose optional `[simulation.world]` and `[simulation.campaign]`
    /// tables set the world and campaign; selection weights come from the
    /// same file.
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_enum, default_value_t = StrategyArg::All)]
    pub strategy: StrategyArg,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Images selected per round.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Images in the initially labelled pool.
    #[arg(long)]
    pub initial: Option<usize>,
    /// World size.
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output report (JSON); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the world and every round's input files here.
    #[arg(long)]
    pub emit_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Campaign report written by `simulate`.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Pal(PalError),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Pal(e) if e.is_data_error() => EXIT_DATA,
            CliError::Pal(_) | CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Pal(e) => write!(f, "{e}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<PalError> for CliError {
    fn from(e: PalError) -> Self {
        CliError::Pal(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses arguments, runs the command and returns the process exit code.
/// Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("pal: {e}");
        return e.exit_code();
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pal: {e}");
            e.exit_code()
        }
    }
}

/// Honors `PAL_THREADS` by sizing the global rayon pool.
fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var("PAL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("PAL_THREADS must be a positive integer, got {raw:?}")))?;
    // a pool may already exist when run() is called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult {
    let log = |msg: &str| {
        if cli.verbose > 0 {
            eprintln!("pal: {msg}");
        }
    };
    match &cli.command {
        Command::Match(a) => cmd_match(a, &log),
        Command::TrainClc(a) => cmd_train(a, &log),
        Command::Score(a) => cmd_score(a, &log),
        Command::Select(a) => cmd_select(a, &log),
        Command::Simulate(a) => cmd_simulate(a, &log),
        Command::Report(a) => cmd_report(a),
    }
}

fn config(arg: &ConfigArg) -> CliResult<SelectionConfig> {
    match &arg.config {
        Some(p) => Ok(load_config(p)?),
        None => Ok(SelectionConfig::default()),
    }
}

/// Wraps a loader error so the message names the flag that supplied the path.
fn flag<T>(name: &str, r: pal_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Pal(e.context(format!("--{name}"))))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| PalError::io(path, e).into())
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Internal(e.to_string()))
}

fn read_json<T: serde::de::DeserializeOwned>(name: &str, path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| PalError::io(path, e).context(format!("--{name}")))?;
    serde_json::from_str(&text).map_err(|e| {
        PalError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        }
        .context(format!("--{name}"))
        .into()
    })
}

pub fn cmd_match(a: &MatchArgs, log: &dyn Fn(&str)) -> CliResult {
    let cfg = config(&a.config)?;
    let mut dump = flag("detections", load_detection_dump(&a.detections))?;
    if let Some(p) = &a.proposals {
        let extra = flag("proposals", load_proposals(p, &dump.classes))?;
        dump.pre_nms_proposals.extend(extra);
        dump.validate().map_err(|e| e.context("--proposals"))?;
    }
    if dump.pre_nms_proposals.is_empty() && !dump.final_detections.is_empty() {
        return Err(CliError::Pal(PalError::Validation(
            "no pre-NMS proposals: pass --proposals or include proposal records in the detection file".into(),
        )));
    }
    let gt = a.gt.as_ref().map(|p| flag("gt", load_ground_truth(p))).transpose()?;
    let pool = match_pool(&dump, gt.as_ref(), cfg.iou_prenms, cfg.iou_tp)?;
    log(&format!(
        "matched {} detections on {} images{}",
        pool.records.len(),
        pool.images.len(),
        if gt.is_some() { " with TP/FP labels" } else { "" }
    ));
    write_matched(&pool, &a.out)?;
    Ok(())
}

fn require_labels(pool: &MatchedPool, name: &str) -> CliResult {
    if let Some(i) = pool.records.iter().position(|r| r.tp_label.is_none()) {
        return Err(CliError::Pal(PalError::Validation(format!(
            "--{name}: record {i} has no TP/FP label; run `pal match --gt` on the labelled pool"
        ))));
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, log: &dyn Fn(&str)) -> CliResult {
    let cfg = config(&a.config)?;
    let pool = flag("labelled", load_matched(&a.labelled))?;
    require_labels(&pool, "labelled")?;
    let bank = ClassifierBank::train(pool.classes.len(), &pool.records, &cfg.classifier)?;
    let trained = bank.models.iter().filter(|m| m.trained).count();
    log(&format!("trained {trained} of {} class classifiers", bank.models.len()));
    write_text(&a.out, &to_json(&bank)?)
}

fn source_name(s: ModelSource) -> &'static str {
    match s {
        ModelSource::Class => "class",
        ModelSource::Fallback => "fallback",
        ModelSource::None => "none",
    }
}

pub fn cmd_score(a: &ScoreArgs, log: &dyn Fn(&str)) -> CliResult {
    let cfg = config(&a.config)?;
    let pool = flag("unlabelled", load_matched(&a.unlabelled))?;
    let bank: ClassifierBank = match (&a.models, &a.labelled) {
        (Some(p), _) => read_json("models", p)?,
        (None, Some(p)) => {
            let l = flag("labelled", load_matched(p))?;
            require_labels(&l, "labelled")?;
            if l.classes != pool.classes {
                return Err(CliError::Pal(PalError::Validation(
                    "labelled and unlabelled files declare different classes".into(),
                )));
            }
            ClassifierBank::train(l.classes.len(), &l.records, &cfg.classifier)?
        }
        (None, None) => return Err(CliError::Usage("pass --models or --labelled".into())),
    };
    if bank.models.len() != pool.classes.len() {
        return Err(CliError::Pal(PalError::Validation(format!(
            "--models has {} classes but the pool declares {}",
            bank.models.len(),
            pool.classes.len()
        ))));
    }
    let lines: Vec<InstanceScoreLine> = bank
        .score(&pool.records)?
        .into_iter()
        .map(|s| InstanceScoreLine {
            image_id: s.image_id,
            class_id: s.class_id,
            instance: s.instance,
            p_tp: s.p_tp,
            lius: s.lius,
            model: source_name(s.source).to_string(),
        })
        .collect();
    log(&format!("scored {} instances", lines.len()));
    write_scores(&pool.classes, &lines, &a.out)?;
    Ok(())
}

pub fn cmd_select(a: &SelectArgs, log: &dyn Fn(&str)) -> CliResult {
    let cfg = config(&a.config)?;
    let labelled = flag("labelled", load_matched(&a.labelled))?;
    let unlabelled = flag("unlabelled", load_matched(&a.unlabelled))?;
    require_labels(&labelled, "labelled")?;
    if labelled.classes != unlabelled.classes {
        return Err(CliError::Pal(PalError::Validation(
            "labelled and unlabelled files declare different classes".into(),
        )));
    }
    let embeddings = flag("embeddings", load_embeddings(&a.embeddings))?;
    let mut state: RoundState = match &a.state {
        Some(p) => {
            let s: RoundState = read_json("state", p)?;
            s.validate().map_err(|e| e.context("--state"))?;
            s
        }
        None => RoundState::new(
            labelled.images.iter().copied(),
            unlabelled.images.iter().copied(),
            cfg.budget_b,
        )
        .map_err(|e| e.context("pools from --labelled/--unlabelled"))?,
    };
    if let Some(b) = a.budget {
        state.budget = b;
    }
    let inputs = RoundInputs {
        num_classes: labelled.classes.len(),
        labelled: &labelled.records,
        unlabelled: &unlabelled.records,
        embeddings: &embeddings,
    };
    let manifest = run_round(&inputs, &cfg, &state)?;
    log(&format!(
        "round {}: selected {} of budget {} ({} deficit)",
        manifest.round, manifest.totals.selected, manifest.budget, manifest.totals.deficit
    ));
    write_selection_manifest(&manifest, &a.out)?;
    if let Some(p) = &a.state_out {
        let next = update_pools(&state, &manifest)?;
        write_text(p, &to_json(&next)?)?;
    }
    Ok(())
}

pub fn cmd_simulate(a: &SimulateArgs, log: &dyn Fn(&str)) -> CliResult {
    let (cfg, mut settings) = match &a.config.config {
        Some(p) => (load_config(p)?, load_simulation_settings(p)?),
        None => (SelectionConfig::default(), SimulationSettings::default()),
    };
    let c = &mut settings.campaign;
    c.seed = a.seed;
    if let Some(v) = a.rounds {
        c.rounds = v;
    }
    if let Some(v) = a.budget {
        c.budget = v;
    }
    if let Some(v) = a.initial {
        c.initial_labelled = v;
    }
    if let Some(v) = a.images {
        settings.world.num_images = v;
    }
    let world = generate_world(&settings.world, a.seed)?;
    log(&format!(
        "world: {} images, {} instances, rarest class {}",
        world.params.num_images,
        world.gt.annotations.len(),
        world.rarest_class()
    ));
    let report = run_campaigns_with_output(
        &world,
        &a.strategy.strategies(),
        &settings.campaign,
        &cfg,
        a.emit_dir.as_deref(),
    )?;
    let json = to_json(&report)?;
    match &a.out {
        Some(p) => write_text(p, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

pub fn cmd_report(a: &ReportArgs) -> CliResult {
    let report: CampaignReport = read_json("input", &a.input)?;
    let text = render_report(&report);
    match &a.out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
