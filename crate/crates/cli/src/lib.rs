//! Command-line pipelines over `vrag-core`: corpus ingestion, retrieval,
//! dataset construction, inference, reward scoring and evaluation. Each
//! subcommand reads and writes files under a fixed output layout.

pub mod commands;
pub mod config;
mod error;
pub mod records;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vrag_core::fcot::{ParseMode, TemplateSet};
use vrag_core::gateway::{Gateway, MockResponder};

pub use config::PipelineConfig;
pub use error::CliError;

pub const CORPUS_DIR: &str = "corpus";
pub const INDEX_DIR: &str = "index";
pub const DATASETS_DIR: &str = "datasets";
pub const ROLLOUTS_DIR: &str = "rollouts";
pub const REPORTS_DIR: &str = "reports";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "vrag", version, about = "Retrieval-augmented deepfake detection pipelines")]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized step; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of retrieved references; overrides the config.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Output root.
    #[arg(long, global = true, default_value = "vrag-out")]
    pub out: PathBuf,
    /// Answer every model call with the deterministic rule-mode mock.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Validate configuration and inputs without writing artifacts.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Parse model responses with exact tag matching.
    #[arg(long, global = true)]
    pub strict_format: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus, query frames and config.
    Synth(SynthArgs),
    /// Build the knowledge-base corpus from an entries/vector file pair.
    Ingest {
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Spread per-class frame targets over an inventory of videos.
    PlanSample {
        #[arg(long)]
        inventory: Option<PathBuf>,
    },
    /// Build and persist the search index over the corpus.
    Index,
    /// Retrieve evidence for every query frame.
    Retrieve {
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Ask the teacher to annotate frames for the knowledge base.
    AnnotateFkd {
        #[arg(long)]
        jobs: Option<PathBuf>,
    },
    /// Partition videos and type Stage-2/3 samples.
    Classify {
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Stage-1 predictions; queried from the policy when absent.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Generate gold reasoning for Stage-2 samples with the teacher.
    BuildFcot,
    /// Write a stage's training file and recipe.
    ExportStage {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Run retrieval-grounded inference and score the answers.
    Infer {
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Compute rewards and group advantages for rollouts.
    ScoreRewards {
        #[arg(long)]
        rollouts: Option<PathBuf>,
    },
    /// Compute AUC, robustness, cost and judge metrics.
    Eval {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        responses: Option<PathBuf>,
    },
    /// Render the metric tables.
    Report,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Where to write the fixture; defaults to `<out>/synthetic`.
    #[arg(long)]
    pub dir: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 12)]
    pub videos: usize,
    #[arg(long, default_value_t = 3)]
    pub frames: usize,
}

impl Command {
    pub fn name(&self) -> String {
        match self {
            Command::Synth(_) => "synth".into(),
            Command::Ingest { .. } => "ingest".into(),
            Command::PlanSample { .. } => "plan-sample".into(),
            Command::Index => "index".into(),
            Command::Retrieve { .. } => "retrieve".into(),
            Command::AnnotateFkd { .. } => "annotate-fkd".into(),
            Command::Classify { .. } => "classify".into(),
            Command::BuildFcot => "build-fcot".into(),
            Command::ExportStage { stage, .. } => format!("export-stage-{stage}"),
            Command::Infer { .. } => "infer".into(),
            Command::ScoreRewards { .. } => "score-rewards".into(),
            Command::Eval { .. } => "eval".into(),
            Command::Report => "report".into(),
        }
    }
}

/// Resolved configuration and flags shared by every command.
pub struct Context {
    pub config: PipelineConfig,
    pub out: PathBuf,
    pub mock: bool,
    pub dry_run: bool,
    pub strict_format: bool,
    pub templates: TemplateSet,
    written: Vec<PathBuf>,
}

impl Context {
    pub fn new(cli: &Cli) -> Result<Self, CliError> {
        let mut config = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.seed = Some(seed);
        }
        if let Some(k) = cli.k {
            config.retrieval.k = k;
        }
        config.validate()?;
        let templates = match &config.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        Ok(Context {
            config,
            out: cli.out.clone(),
            mock: cli.mock,
            dry_run: cli.dry_run,
            strict_format: cli.strict_format,
            templates,
            written: Vec::new(),
        })
    }

    /// The run seed; commands with randomized steps refuse to run without one.
    pub fn seed(&self) -> Result<u64, CliError> {
        self.config.seed.ok_or_else(|| CliError::Validation("no seed: set `seed` in the config or pass --seed".into()))
    }

    pub fn dir(&self, sub: &str) -> PathBuf {
        self.out.join(sub)
    }

    pub fn file(&self, sub: &str, name: &str) -> PathBuf {
        self.out.join(sub).join(name)
    }

    pub fn parse_mode(&self) -> ParseMode {
        if self.strict_format {
            ParseMode::Strict
        } else {
            ParseMode::Lenient
        }
    }

    /// An input path from a flag or the config, which must exist.
    pub fn input(&self, flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
        let path = flag
            .clone()
            .or_else(|| configured.clone())
            .ok_or_else(|| CliError::Validation(format!("no {what} given")))?;
        require(&path, what)?;
        Ok(path)
    }

    /// Gateway for a role: the rule-mode mock under `--mock`, HTTP otherwise.
    pub fn gateway(&self, role: &config::RoleConfig) -> Result<Gateway, CliError> {
        if self.mock {
            let mock = MockResponder::rules(self.config.seed.unwrap_or(0));
            Ok(Gateway::new(role.transport.clone(), Arc::new(mock))?)
        } else {
            Ok(Gateway::http(role.transport.clone())?)
        }
    }

    /// Records an artifact written by the current command.
    pub fn wrote(&mut self, path: PathBuf) {
        self.written.push(path);
    }

    pub fn write_json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<(), CliError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes)?;
        self.wrote(path);
        Ok(())
    }

    pub fn write_jsonl<'a, T: Serialize + 'a>(
        &mut self,
        path: PathBuf,
        records: impl IntoIterator<Item = &'a T>,
    ) -> Result<usize, CliError> {
        let n = vrag_core::jsonl::write(&path, records)?;
        self.wrote(path);
        Ok(n)
    }
}

/// Fails with a validation error if `path` does not exist.
pub fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} {} does not exist", path.display())))
    }
}

/// Provenance of the runs that wrote into an output root.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub runs: BTreeMap<String, RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_digest: String,
    pub seed: Option<u64>,
    pub k: usize,
    pub mock: bool,
    pub strict_format: bool,
    /// Artifact path (relative to the output root) and its SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub finished_unix: u64,
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn write_manifest(ctx: &Context, command: &str) -> Result<(), CliError> {
    let path = ctx.out.join(MANIFEST_FILE);
    let mut manifest: RunManifest = match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
        Err(_) => RunManifest::default(),
    };
    manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
    let mut artifacts = BTreeMap::new();
    for p in &ctx.written {
        let shown = p.strip_prefix(&ctx.out).unwrap_or(p).display().to_string();
        if p.is_file() {
            artifacts.insert(shown, file_digest(p)?);
        } else if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            files.sort();
            for f in files.into_iter().filter(|f| f.is_file()) {
                let shown = f.strip_prefix(&ctx.out).unwrap_or(&f).display().to_string();
                artifacts.insert(shown, file_digest(&f)?);
            }
        }
    }
    let finished_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    manifest.runs.insert(
        command.to_string(),
        RunRecord {
            config_digest: ctx.config.digest(),
            seed: ctx.config.seed,
            k: ctx.config.retrieval.k,
            mock: ctx.mock,
            strict_format: ctx.strict_format,
            artifacts,
            finished_unix,
        },
    );
    std::fs::create_dir_all(&ctx.out)?;
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Runs one command. Artifacts go under `--out`; nothing is written with
/// `--dry-run`.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut ctx = Context::new(cli)?;
    let name = cli.command.name();
    match &cli.command {
        Command::Synth(args) => commands::synth(&mut ctx, args),
        Command::Ingest { source } => commands::ingest(&mut ctx, source),
        Command::PlanSample { inventory } => commands::plan_sample(&mut ctx, inventory),
        Command::Index => commands::index(&mut ctx),
        Command::Retrieve { frames } => commands::retrieve(&mut ctx, frames),
        Command::AnnotateFkd { jobs } => commands::annotate_fkd(&mut ctx, jobs),
        Command::Classify { frames, predictions } => commands::classify(&mut ctx, frames, predictions),
        Command::BuildFcot => commands::build_fcot(&mut ctx),
        Command::ExportStage { stage, frames } => commands::export_stage(&mut ctx, *stage, frames),
        Command::Infer { frames } => commands::infer(&mut ctx, frames),
        Command::ScoreRewards { rollouts } => commands::score_rewards(&mut ctx, rollouts),
        Command::Eval { scores, records, responses } => commands::eval(&mut ctx, scores, records, responses),
        Command::Report => commands::report(&mut ctx),
    }
    .map_err(|e| e.context(&name))?;
    if !ctx.dry_run {
        write_manifest(&ctx, &name)?;
    }
    Ok(())
}

/// Parses arguments and runs, mapping the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
