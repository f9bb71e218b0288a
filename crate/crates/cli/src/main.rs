use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use osfl_core::client::ClientUpload;
use osfl_core::experiment::*;
use osfl_core::Result;

/// One-shot federated learning with feature-guided rectified flow clients and a distilling server.
#[derive(Parser, Debug)]
#[command(name = "osfl", version)]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in benchmark.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set distill.alpha=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run directory; replaces `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the corpus and write the client partition.
    Partition,
    /// Train every client and write its upload.
    TrainClients,
    /// Sample the synthetic feature set from the uploads.
    Synthesize,
    /// Distil the global student and evaluate it.
    Distill,
    /// FedAvg and centralised baselines.
    Fedavg,
    /// Nearest-neighbour memorisation report, feature route against pixel route.
    PrivacyReport,
    /// t-SNE figures of client features and student taps.
    Tsne,
    /// Originals, generated features, and decoded images for one client.
    Gallery {
        #[arg(long, default_value_t = 0)]
        client: usize,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Sampling time of the flow against DDPM.
    Timing {
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        repeats: usize,
    },
    /// Every stage of the pipeline, with baselines.
    Run,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p, &cli.set)?,
        None => parse_config(BENCHMARK_CONFIG, "<builtin benchmark>", &cli.set)?,
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

/// Later stages reuse the partition an earlier `partition` call stored in the run directory.
fn stored_partition(mut cfg: ExperimentConfig, dir: &RunDir) -> ExperimentConfig {
    if cfg.partition_file.is_none() && dir.partition().is_file() {
        cfg.partition_file = Some(dir.partition());
    }
    cfg
}

fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = load(cli)?;
    let dir = RunDir::new(&cfg.output_dir);
    let cfg = match cli.command {
        Command::Partition | Command::Run => cfg,
        _ => stored_partition(cfg, &dir),
    };
    dir.write_provenance(&cfg)?;
    let mut artifacts = vec![dir.config(), dir.seed(), dir.git_describe()];
    match &cli.command {
        Command::Partition => {
            stage_partition(&cfg, &dir)?;
            artifacts.push(dir.partition());
        }
        Command::TrainClients => {
            let prepared = stage_partition(&cfg, &dir)?;
            let runs = stage_clients(&cfg, &dir, &prepared)?;
            artifacts.push(dir.client_losses());
            for r in &runs {
                artifacts.push(dir.uploads().join(ClientUpload::file_name(r.upload.client_id)));
                if r.featurizer.extractor().is_some() {
                    artifacts.push(dir.extractor(r.upload.client_id));
                }
            }
        }
        Command::Synthesize => {
            stage_synthesize(&cfg, &dir)?;
            artifacts.push(dir.synthetic());
        }
        Command::Distill => {
            let prepared = prepare(&cfg)?;
            let out = stage_distill(&cfg, &dir, &prepared)?;
            println!("pooled accuracy {:.4}", out.report.pooled);
            artifacts.extend([dir.student(), dir.teacher(), dir.metrics()]);
        }
        Command::Fedavg => {
            let prepared = prepare(&cfg)?;
            let out = stage_baselines(&cfg, &dir, &prepared)?;
            if let Some(f) = &out.fedavg {
                println!("fedavg accuracy {:.4}", f.accuracy_curve.last().copied().unwrap_or(0.0));
                artifacts.push(dir.fedavg_curve());
            }
            if let Some(a) = out.centralized_accuracy {
                println!("centralized accuracy {a:.4}");
            }
            artifacts.push(dir.baselines());
        }
        Command::PrivacyReport => {
            let prepared = prepare(&cfg)?;
            stage_privacy(&cfg, &dir, &prepared)?;
            artifacts.push(dir.privacy());
        }
        Command::Tsne => {
            let prepared = prepare(&cfg)?;
            let r = stage_tsne(&cfg, &dir, &prepared)?;
            println!("separation features {:.3} before {:.3} after {:.3}", r.features, r.student_before, r.student_after);
            let f = dir.figures();
            artifacts.extend(["tsne_features.png", "tsne_student_before.png", "tsne_student_after.png", "tsne.json"].map(|n| f.join(n)));
        }
        Command::Gallery { client, count } => {
            let prepared = prepare(&cfg)?;
            stage_gallery(&cfg, &dir, &prepared, *client, *count)?;
            artifacts.push(dir.figures().join("gallery.png"));
        }
        Command::Timing { samples, repeats } => {
            let r = stage_timing(&cfg, &dir, *samples, *repeats)?;
            println!("speedup {:.2}", r.speedup);
            artifacts.push(dir.timing());
        }
        Command::Run => {
            let s = run_experiment(&cfg)?;
            println!("pooled accuracy {:.4}", s.pooled_accuracy);
            artifacts.extend([dir.partition(), dir.synthetic(), dir.student(), dir.teacher(), dir.metrics(), dir.summary(), dir.baselines()]);
            artifacts.push(dir.figures().join("losses.png"));
        }
    }
    Ok(artifacts)
}

fn missing(artifacts: &[PathBuf]) -> Vec<&Path> {
    artifacts.iter().map(PathBuf::as_path).filter(|p| !p.is_file()).collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(artifacts) => {
            let gone = missing(&artifacts);
            if gone.is_empty() {
                for a in &artifacts {
                    println!("wrote {}", a.display());
                }
                ExitCode::SUCCESS
            } else {
                for p in gone {
                    eprintln!("error: expected artifact missing: {}", p.display());
                }
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
