//! `ubp` — pipeline driver.
//!
//! Each stage is a subcommand reading and writing declared files under the
//! configured output directory; `all` runs the full evaluation protocol on
//! an existing event log. Log level comes from the `UBP_LOG` env var.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ubp_core::config::{RunConfig, Scale};
use ubp_core::event::EventFormat;
use ubp_core::pipeline::Pipeline;

#[derive(Parser)]
#[command(name = "ubp", version, about = "Behavioral-profile pipeline")]
struct Cli {
    /// Run-config TOML; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker-thread cap (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Desk-scale preset (the default).
    #[arg(long, global = true, conflicts_with = "paper")]
    desk: bool,

    /// Paper-scale preset.
    #[arg(long, global = true)]
    paper: bool,

    /// Overrides run.out_dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the default config TOML and exit.
    InitConfig {
        /// Destination path.
        #[arg(long, default_value = "ubp.toml")]
        path: PathBuf,
    },
    /// Generate the synthetic event corpus.
    GenSynth,
    /// Validate an external event file and write the canonical log.
    Ingest {
        /// Source file (JSONL or CSV).
        #[arg(long)]
        input: PathBuf,
        /// Input format: jsonl or csv.
        #[arg(long, default_value = "jsonl")]
        format: String,
    },
    /// Split the log into input and target periods.
    Split,
    /// Compute handcrafted features and corpus statistics.
    Features,
    /// Train the two sequential encoders and export embeddings.
    TrainSeq,
    /// Train the graph embedder.
    TrainTwhin,
    /// Train the cross-network fusion model.
    TrainDcn,
    /// Concatenate the profile components.
    Assemble,
    /// Probe the full profile on the reserved target window.
    Eval,
    /// Run the component-ablation table.
    Ablate,
    ///

    /// Run split → features → training → assemble → eval → ablate.
    All,
}

fn load_config(cli: &Cli) -> ubp_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.run.threads = threads;
    }
    if cli.paper {
        cfg.scale = Scale::Paper;
    } else if cli.desk {
        cfg.scale = Scale::Desk;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.run.out_dir = dir.display().to_string();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> ubp_core::Result<()> {
    if let Cmd::InitConfig { path } = &cli.cmd {
        std::fs::write(path, RunConfig::default().to_toml())?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    if cfg.run.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.threads)
            .build_global()
            .map_err(|e| ubp_core::Error::invalid(format!("thread pool: {e}")))?;
    }
    let pipe = Pipeline::new(cfg)?;
    match cli.cmd {
        Cmd::InitConfig { .. } => unreachable!(),
        Cmd::GenSynth => pipe.gen_synth()?,
        Cmd::Ingest { input, format } => {
            let format = EventFormat::from_name(&format)
                .ok_or_else(|| ubp_core::Error::invalid("format must be jsonl or csv"))?;
            let (ok, bad) = pipe.ingest(&input, format)?;
            println!("ingested {ok} events, rejected {bad}");
        }
        Cmd::Split => {
            let info = pipe.split()?;
            println!(
                "train_end={} inner_end={} target_end={}",
                info.train_end, info.inner_end, info.target_end
            );
        }
        Cmd::Features => pipe.features()?,
        Cmd::TrainSeq => pipe.train_seq()?,
        Cmd::TrainTwhin => pipe.train_twhin()?,
        Cmd::TrainDcn => pipe.train_dcn()?,
        Cmd::Assemble => {
            let profile = pipe.assemble()?;
            println!(
                "profile: {} users x {} dims",
                profile.matrix.user_ids.len(),
                profile.matrix.dim
            );
        }
        Cmd::Eval => {
            for r in pipe.eval()? {
                println!("{}: auc {:.4} ({} pos / {} neg)", r.task, r.auc, r.n_pos, r.n_neg);
            }
        }
        Cmd::Ablate => {
            for r in pipe.ablate()? {
                println!(
                    "{:<14} {:<10} auc {:.4} ± {:.4} ({} seeds)",
                    r.mask, r.task, r.mean_auc, r.std_auc, r.n_seeds
                );
            }
        }
        Cmd::All => {
            pipe.all()?;
            println!("pipeline complete; see {}", pipe.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UBP_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
