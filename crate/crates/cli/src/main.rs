use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lcco::clip::{ClipBackend, ExternalBackend, FixtureBackend, FixtureStore};
use lcco::harness::{self, fixtures, ExperimentConfig};
use lcco::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "lcco", version, about = "Co-segmentation of image sets guided by CLIP semantics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the configured manifest and write checkpoints plus a loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the configured evaluation manifests.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images per evaluation set; overrides `n_eval` from the config.
        #[arg(long)]
        n_eval: Option<usize>,
    },
    /// Segment every PNG in a directory as one image set.
    Infer {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write `<name>_overlay.png` images.
        #[arg(long)]
        overlay: bool,
    },
    /// Encode a dataset tree and a class list into a fixture file.
    RecordFixtures {
        #[arg(long)]
        images: PathBuf,
        /// One class name per line, rendered with the prompt template.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take resolution, template and encoder command from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use hashed synthetic embeddings instead of the CLIP encoder.
        #[arg(long)]
        synthetic: bool,
        /// Embedding width for `--synthetic`.
        #[arg(long, default_value_t = 512)]
        dim: usize,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = harness::train(&cfg)?;
            if let Some(last) = outcome.reports.last() {
                println!("steps: {}", outcome.reports.len());
                println!("final l_total: {}", last.l_total);
            }
            println!("clip checksum: {}", outcome.clip_checksum);
            println!("loss log: {}", outcome.loss_log.display());
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Eval {
            config,
            checkpoint,
            n_eval,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = harness::evaluate(&cfg, &checkpoint, n_eval)?;
            for d in &report.datasets {
                println!(
                    "{}\tsets {}\timages {}\tP {:.2}\tJ {:.2}",
                    d.manifest.display(),
                    d.sets,
                    d.images,
                    d.precision,
                    d.jaccard
                );
            }
            println!("report: {}", cfg.output_dir.join("eval_report.json").display());
        }
        Command::Infer {
            images,
            checkpoint,
            out,
            overlay,
        } => {
            let outcome = harness::infer(&images, &checkpoint, &out, overlay)?;
            for p in outcome.masks.iter().chain(&outcome.overlays) {
                println!("{}", p.display());
            }
        }
        Command::RecordFixtures {
            images,
            prompts,
            out,
            config,
            synthetic,
            dim,
        } => {
            let cfg = match &config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ExperimentConfig::default(),
            };
            let source: Arc<dyn ClipBackend> = if synthetic {
                Arc::new(FixtureBackend::synthesizing(FixtureStore::new(dim)))
            } else {
                Arc::new(ExternalBackend::spawn(&cfg.clip.external)?)
            };
            let store = fixtures::record_tree(
                source.as_ref(),
                &images,
                &prompts,
                &cfg.train.prompt_template,
                cfg.model.resolution,
            )
            .with_context(|| format!("recording {}", images.display()))?;
            store.save(&out)?;
            println!("{} embeddings of width {} -> {}", store.len(), store.dim(), out.display());
            println!("checksum: {}", store.checksum());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<lcco::Error>())
                .map_or(ErrorKind::Data, lcco::Error::kind);
            ExitCode::from(exit_code(kind))
        }
    }
}
