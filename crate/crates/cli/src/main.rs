use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use anchorbind::config::RunConfig;
use anchorbind::pipeline::Progress;
use anchorbind::retrieval::Baseline;
use anchorbind_cli::{cmd_embed, cmd_eval, cmd_gen_data, cmd_retrieve, cmd_train, parse_k_list, TrainOptions};

#[derive(Parser)]
#[command(name = "anchorbind", version, about = "Staged contrastive binding of modality encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Two stages: satellite to ground, audio to satellite.
    Default,
    /// The default stages plus elevation to satellite.
    ThreeStage,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset run config as JSON.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
    },
    /// Generate the synthetic world's datasets and manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured stages.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps and checkpoint.
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// All-pairs retrieval evaluation.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "1,5,10")]
        k: String,
        /// Seed for the random baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for reports.csv and ranks.csv (defaults to the checkpoint's).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed one modality of a dataset into the joint space.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        modality: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k gallery items per query.
    Retrieve {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        k: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anchorbind::Result<()> {
    match cli.command {
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Default => RunConfig::default(),
                Preset::ThreeStage => RunConfig::three_stage(),
            };
            println!("{}", cfg.to_json());
        }
        Command::GenData { config, out } => {
            let manifest = cmd_gen_data(&config, out.as_deref())?;
            println!("wrote {}", manifest.display());
        }
        Command::Train {
            config,
            resume,
            max_steps,
            out,
        } => {
            let outcome = cmd_train(&config, &TrainOptions { out, resume, max_steps })?;
            let state = &outcome.state;
            match outcome.progress {
                Progress::Completed => println!("completed stages: {}", state.completed.join(", ")),
                Progress::Suspended => {
                    let a = state.active.as_ref().expect("suspended state has an active stage");
                    println!("suspended in {} at step {}", a.stage, a.step);
                }
            }
            if let Some(last) = state.metrics.last() {
                println!("last step: stage {} loss {:.6} tau {:.6}", last.stage, last.loss, last.tau);
            }
            println!("wrote {}", outcome.checkpoint.display());
        }
        Command::Eval {
            ckpt,
            bundle,
            k,
            seed,
            out,
        } => {
            let ks = parse_k_list(&k)?;
            let out = out.unwrap_or_else(|| ckpt.parent().map(PathBuf::from).unwrap_or_default());
            let reports = cmd_eval(&ckpt, &bundle, &ks, seed, &out)?;
            for r in reports.iter().filter(|r| r.baseline == Baseline::Model) {
                let recalls: Vec<String> = r.recalls.iter().map(|(k, v)| format!("R@{k}={v:.1}")).collect();
                println!(
                    "{:>10} -> {:<10} {} median={}",
                    r.query_modality,
                    r.gallery_modality,
                    recalls.join(" "),
                    r.median_rank
                );
            }
            println!("wrote {}", out.join("reports.csv").display());
        }
        Command::Embed {
            ckpt,
            data,
            modality,
            out,
        } => {
            let store = cmd_embed(&ckpt, &data, &modality, &out)?;
            println!("wrote {} embeddings of dim {} to {}", store.len(), store.dim(), out.display());
        }
        Command::Retrieve {
            queries,
            gallery,
            k,
            out,
        } => {
            let csv = cmd_retrieve(&queries, &gallery, k)?;
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| anchorbind::Error::io(&p, e))?,
                None => {
                    let mut out = std::io::stdout().lock();
                    match out.write_all(csv.as_bytes()).and_then(|()| out.flush()) {
                        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                            return Err(anchorbind::Error::io("<stdout>", e));
                        }
                        _ => {}
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
