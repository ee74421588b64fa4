use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use colakg::pipeline::{self, Layout, WorkDirLock};
use colakg::synthetic::{SyntheticConfig, SyntheticData};
use colakg::{Error, PipelineConfig};

/// Knowledge-graph comprehension recommender pipeline.
///
/// Any configuration key may also be given as `--key=value`; such
/// overrides beat the config file, which beats the defaults.
#[derive(Debug, Parser)]
#[command(name = "colakg", version)]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for splitting, prompt sampling and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, bitwise reproducible run.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter and split interactions into the work dir.
    Prepare,
    /// Render prompts and build the semantic embedding tables.
    Embed,
    /// Build the top-k semantic item-item graph.
    Graph,
    /// Train and keep the best-validation checkpoint.
    Train,
    /// Score the checkpoint on the test split.
    Eval,
    /// Retrain the full model and four ablations.
    Ablate,
    /// Retrain across the configured neighbor counts.
    Sweep,
    /// Write a small synthetic dataset (interactions, triples, item map).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 5)]
        clusters: usize,
    },
}

const FLAGS: [&str; 5] = ["config", "seed", "work-dir", "threads", "deterministic"];

/// Separates `--key=value` configuration overrides from clap arguments.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let keys: Vec<&str> = PipelineConfig::default().entries().into_iter().map(|(k, _)| k).collect();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let parsed = arg
            .strip_prefix("--")
            .and_then(|a| a.split_once('='))
            .filter(|(k, _)| !FLAGS.contains(k) && keys.contains(&k.replace('-', "_").as_str()));
        match parsed {
            Some((k, v)) => overrides.push((k.replace('-', "_"), v.to_owned())),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn run(cli: Cli, mut overrides: Vec<(String, String)>) -> colakg::Result<()> {
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(dir) = &cli.work_dir {
        overrides.push(("work_dir".into(), dir.display().to_string()));
    }
    if let Some(t) = cli.threads {
        overrides.push(("threads".into(), t.to_string()));
    }
    if cli.deterministic {
        overrides.push(("deterministic".into(), "true".into()));
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    let threads = if cfg.deterministic { 1 } else { cfg.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Internal(e.to_string()))?;

    if let Command::Synth {
        out,
        users,
        items,
        clusters,
    } = &cli.command
    {
        let syn = SyntheticConfig {
            n_users: *users,
            n_items: *items,
            n_clusters: *clusters,
            seed: cfg.train.seed,
            ..SyntheticConfig::default()
        };
        let paths = SyntheticData::generate(&syn).write(out)?;
        println!("interactions\t{}", paths.interactions.display());
        println!("triples\t{}", paths.triples.display());
        println!("item_map\t{}", paths.item_map.display());
        return Ok(());
    }

    let _lock = WorkDirLock::acquire(&Layout::new(&cfg.work_dir))?;
    match cli.command {
        Command::Prepare => {
            let ds = pipeline::cmd_prepare(&cfg)?;
            println!(
                "users\t{}\nitems\t{}\ntrain\t{}\nval\t{}\ntest\t{}",
                ds.n_users(),
                ds.n_items(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len()
            );
        }
        Command::Embed => {
            let table = pipeline::cmd_embed(&cfg)?;
            println!("vectors\t{}\ndim\t{}", table.len(), table.dim());
        }
        Command::Graph => {
            let g = pipeline::cmd_graph(&cfg)?;
            println!("items\t{}\nk\t{}", g.n_items(), g.k());
        }
        Command::Train => {
            let best = pipeline::cmd_train(&cfg, &mut |line| println!("{line}"))?;
            println!("best_epoch\t{best}");
        }
        Command::Eval => print!("{}", pipeline::cmd_eval(&cfg)?.to_tsv()),
        Command::Ablate => print!("{}", colakg::experiment::rows_to_tsv(&pipeline::cmd_ablate(&cfg)?)),
        Command::Sweep => print!("{}", colakg::experiment::rows_to_tsv(&pipeline::cmd_sweep(&cfg)?)),
        Command::Synth { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
