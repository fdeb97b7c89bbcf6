mod commands;
mod config;
mod exit;
mod session;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{PartialConfig, PartialEndpoint};
use crate::exit::Failure;

#[derive(Parser)]
#[command(name = "cocotree", version, about = "Concept-tree reasoning for image-caption scoring")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct GlobalArgs {
    /// TOML config file; flags override it, it overrides the environment.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "URL")]
    llm_endpoint: Option<String>,
    #[arg(long, global = true, value_name = "URL")]
    vlm_endpoint: Option<String>,
    /// Defaults to the LLM endpoint.
    #[arg(long, global = true, value_name = "URL")]
    judge_endpoint: Option<String>,
    /// Answer every model query from a JSON mock table instead of endpoints.
    #[arg(long, global = true, value_name = "FILE")]
    mock: Option<PathBuf>,
    /// Weight of the linguistic score in the composite node score.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Weight of the base score when fusing with the path weight.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Number of entities per caption (m).
    #[arg(long, global = true)]
    entities: Option<usize>,
    /// Children per expanded node (s).
    #[arg(long, global = true)]
    split: Option<usize>,
    /// Expansion rounds below the entities (l).
    #[arg(long, global = true)]
    depth: Option<usize>,
    #[arg(long, global = true)]
    beam_width: Option<usize>,
    #[arg(long, global = true, value_enum)]
    strategy: Option<StrategyArg>,
    /// Expand at most this many frontier nodes per level.
    #[arg(long, global = true)]
    prune_frontier: Option<usize>,
    #[arg(long, global = true, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    /// Skip the response cache (and its lock).
    #[arg(long, global = true)]
    no_cache: bool,
    /// Dataset manifest.
    #[arg(long, global = true, value_name = "FILE")]
    dataset: Option<PathBuf>,
    /// Output file (build-tree, score) or directory (eval, explain, sweep).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Overrides the manifest's subsampling seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Max,
    Beam,
}

impl GlobalArgs {
    fn to_partial(&self) -> PartialConfig {
        let endpoint = |url: &Option<String>| PartialEndpoint {
            base_url: url.clone(),
            ..Default::default()
        };
        PartialConfig {
            alpha: self.alpha,
            beta: self.beta,
            entities: self.entities,
            split: self.split,
            depth: self.depth,
            beam_width: self.beam_width,
            strategy: self.strategy.map(|s| match s {
                StrategyArg::Max => "max".to_owned(),
                StrategyArg::Beam => "beam".to_owned(),
            }),
            prune_frontier: self.prune_frontier,
            cache_dir: self.cache_dir.clone(),
            no_cache: self.no_cache.then_some(true),
            dataset: self.dataset.clone(),
            out: self.out.clone(),
            seed: self.seed,
            parallelism: self.parallelism,
            mock: self.mock.clone(),
            llm: endpoint(&self.llm_endpoint),
            vlm: endpoint(&self.vlm_endpoint),
            judge: endpoint(&self.judge_endpoint),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the concept tree of a caption and print it as JSON.
    BuildTree {
        caption: String,
    },
    /// Score one image-caption pair.
    Score {
        #[arg(long)]
        image: String,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value = "coco-tree")]
        scorer: String,
    },
    /// Evaluate a dataset and write report files to --out.
    Eval {
        #[arg(long, default_value = "coco-tree")]
        scorer: String,
        /// Also judge the AND/OR rules of every selected path.
        #[arg(long)]
        entailment: bool,
    },
    /// Print the reasoning path behind a score.
    Explain {
        /// Sample id from a previous eval in --out.
        #[arg(long, conflicts_with_all = ["image", "caption"])]
        sample: Option<String>,
        #[arg(long, requires = "caption")]
        image: Option<String>,
        #[arg(long, requires = "image")]
        caption: Option<String>,
        #[arg(long, value_enum, default_value = "both")]
        connective: ConnectiveArg,
        /// Print every beam frontier.
        #[arg(long)]
        trace: bool,
    },
    /// Inspect or empty the response cache.
    Cache {
        #[arg(value_enum)]
        action: CacheAction,
    },
    /// Evaluate over a parameter grid, one report per cell.
    Sweep {
        /// NAME=START:STOP:STEP; repeat for a cartesian grid.
        #[arg(long = "sweep", required = true, value_name = "SPEC")]
        specs: Vec<String>,
        #[arg(long, default_value = "coco-tree")]
        scorer: String,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConnectiveArg {
    And,
    Or,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum CacheAction {
    Stats,
    Clear,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let flags = cli.global.to_partial();
    let file = match &cli.global.config {
        Some(path) => PartialConfig::from_file(path)?,
        None => PartialConfig::default(),
    };
    let env = PartialConfig::from_env(|k| std::env::var(k).ok());
    let cfg = flags.over(file).over(env).resolve()?;
    match cli.command {
        Command::BuildTree { caption } => commands::build_tree(&cfg, &caption),
        Command::Score { image, caption, scorer } => commands::score(&cfg, &image, &caption, &scorer),
        Command::Eval { scorer, entailment } => commands::eval(&cfg, &scorer, entailment),
        Command::Explain {
            sample,
            image,
            caption,
            connective,
            trace,
        } => match (sample, image, caption) {
            (Some(id), _, _) => commands::explain_sample(&cfg, &id, connective, trace),
            (None, Some(image), Some(caption)) => commands::explain_live(&cfg, &image, &caption, connective, trace),
            _ => Err(Failure::usage("explain needs --sample, or --image with --caption")),
        },
        Command::Cache { action } => commands::cache(&cfg, action),
        Command::Sweep { specs, scorer } => sweep::run(&cfg, &specs, &scorer),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
