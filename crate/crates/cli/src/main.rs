use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sessrec::commands;
use sessrec::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "sessrec",
    about = "Price-aware session recommender: preprocess, train, evaluate",
    version
)]
struct Cli {
    /// Config file (INI-style sections); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Model variant (full, no-price, price-conv-only, uniform-levels,
    /// no-category, no-brand, no-price-category, no-price-brand,
    /// no-category-brand, id-only, gcn, no-cooccurrence, no-fusion,
    /// single-loss).
    #[arg(long, global = true)]
    variant: Option<String>,

    /// Comma-separated ranking cutoffs, e.g. 10,20.
    #[arg(long, global = true)]
    k: Option<String>,

    /// Worker threads for evaluation scoring.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Force single-threaded evaluation.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw events, build/filter/split sessions, fit price levels.
    Preprocess,
    /// Price-level scheme inspection.
    Levels {
        #[command(subcommand)]
        action: LevelsAction,
    },
    /// Hypergraph inspection.
    Graph {
        #[command(subcommand)]
        action: GraphAction,
    },
    /// Train a model on the preprocessed sessions.
    Train,
    /// Score the test split (and baselines) with a checkpoint.
    Evaluate,
    /// Rank items for an ad-hoc session.
    Recommend {
        /// Comma-separated raw item ids forming the session prefix.
        #[arg(long)]
        items: String,
        /// How many items to print.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Train and evaluate a list of model variants.
    Ablate {
        /// Comma-separated variant names; all standard variants when omitted.
        #[arg(long)]
        variants: Option<String>,
        /// Average each variant over this many consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Generate a synthetic event log with archetype structure.
    Synth,
    /// Verify analytic gradients against finite differences (exit 2 on breach).
    Gradcheck,
    /// Emit per-figure breakdown tables from a checkpoint.
    PlotData,
}

#[derive(Subcommand)]
enum LevelsAction {
    /// Write the per-category fit table (mu, delta, min, max, cut prices).
    Export,
}

#[derive(Subcommand)]
enum GraphAction {
    /// Print node/edge counts and degree histograms.
    Stats,
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(variant) = &cli.variant {
        cfg.variant_name = variant.clone();
    }
    if let Some(ks) = &cli.k {
        cfg.ks = ks
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<Vec<usize>, _>>()
            .map_err(|e| anyhow::anyhow!("bad --k list: {e}"))?;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers.max(1);
    }
    if cli.deterministic {
        cfg.workers = 1;
    }

    match &cli.command {
        Command::Preprocess => commands::cmd_preprocess(&cfg)?,
        Command::Levels { action: LevelsAction::Export } => commands::cmd_levels_export(&cfg)?,
        Command::Graph { action: GraphAction::Stats } => commands::cmd_graph_stats(&cfg)?,
        Command::Train => commands::cmd_train(&cfg)?,
        Command::Evaluate => commands::cmd_evaluate(&cfg)?,
        Command::Recommend { items, top } => commands::cmd_recommend(&cfg, items, *top)?,
        Command::Ablate { variants, seeds } => {
            commands::cmd_ablate(&cfg, variants.as_deref(), *seeds)?
        }
        Command::Synth => commands::cmd_synth(&cfg)?,
        Command::Gradcheck => return commands::cmd_gradcheck(&cfg),
        Command::PlotData => commands::cmd_plot_data(&cfg)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
