use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::json;

use consnet::checkpoint;
use consnet::eval::evaluate;
use consnet::model::{Embedder, Model};
use consnet::par::init_thread_pool_from_env;
use consnet::pipeline::{detect, read_detections, write_detections};
use consnet::run::{loss_grad_check, prepare, split_mode, toy_batch, RunConfig};
use consnet::synth::{generate_corpus, Corpus, SynthConfig};
use consnet::train::train;

/// Zero-shot human-object interaction detection over a consistency graph.
#[derive(Parser)]
#[command(name = "consnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Corpus directory (as written by `synth`).
    #[arg(long)]
    data: PathBuf,
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the consistency graph and write it as JSON.
    BuildGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss history (JSON lines).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score the test images with a trained checkpoint.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate detections against the test annotations.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the training loss on a 4-sample batch.
    Gradcheck {
        /// Corpus directory; a small synthetic corpus is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train and evaluate with the semantic branch or its depth swapped.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        embedder: Option<Embedder>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_common(c: &Common) -> anyhow::Result<(Corpus, RunConfig)> {
    let cfg = load_config(c.config.as_deref())?;
    let corpus = Corpus::read_dir(&c.data)?;
    Ok((corpus, cfg))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Synth { out, config, seed } => {
            let mut cfg: SynthConfig = match config {
                None => SynthConfig::default(),
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let corpus = generate_corpus(&cfg)?;
            corpus.write_dir(&out)?;
            println!(
                "{}",
                json!({"classes": corpus.space.num_classes(), "train_images": corpus.train_gt.len(), "test_images": corpus.test_gt.len()})
            );
        }
        Command::BuildGraph { common, out } => {
            let (corpus, cfg) = load_common(&common)?;
            let prep = prepare(&corpus, &cfg)?;
            write_text(&out, &prep.graph.to_json())?;
            println!(
                "{}",
                json!({"nodes": prep.graph.node_count(), "edges": prep.graph.edge_count()})
            );
        }
        Command::Train {
            common,
            out,
            history,
        } => {
            let (corpus, cfg) = load_common(&common)?;
            let prep = prepare(&corpus, &cfg)?;
            let mut model = Model::new(cfg.model.clone(), corpus.space.num_classes());
            let records = train(
                &mut model,
                &prep.samples,
                &prep.ctx,
                &cfg.train,
                &prep.trained,
            )?;
            checkpoint::save(&model, &out)?;
            if let Some(h) = history {
                let mut w = create(&h)?;
                for r in &records {
                    serde_json::to_writer(&mut w, r)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            println!(
                "{}",
                json!({
                    "steps": records.len(),
                    "initial_loss": records.first().map(|r| r.total),
                    "final_loss": records.last().map(|r| r.total),
                })
            );
        }
        Command::Detect {
            common,
            checkpoint: ckpt,
            out,
        } => {
            let (corpus, cfg) = load_common(&common)?;
            let model = checkpoint::load(&ckpt)?;
            anyhow::ensure!(
                model.num_classes == corpus.space.num_classes(),
                "checkpoint scores {} classes, the label space has {}",
                model.num_classes,
                corpus.space.num_classes()
            );
            let prep = prepare(&corpus, &cfg)?;
            let cache = model.cache(&prep.ctx)?;
            let dets = detect(
                &model,
                &prep.ctx,
                &cache,
                &prep.test_images,
                cfg.detect.theta_nis,
                cfg.exec,
            )?;
            write_detections(&dets, create(&out)?)?;
            println!("{}", json!({"detections": dets.len()}));
        }
        Command::Eval {
            common,
            detections,
            out,
        } => {
            let (corpus, cfg) = load_common(&common)?;
            let dets = read_detections(BufReader::new(
                File::open(&detections)
                    .with_context(|| format!("opening {}", detections.display()))?,
            ))?;
            let prep = prepare(&corpus, &cfg)?;
            let mode = split_mode(&prep, cfg.rare_threshold);
            let report = evaluate(
                &dets,
                &corpus.test_gt,
                corpus.space.num_classes(),
                &mode,
                cfg.exec,
            )?;
            let text = report.to_json();
            match out {
                Some(p) => write_text(&p, &text)?,
                None => println!("{text}"),
            }
        }
        Command::Gradcheck {
            data,
            config,
            eps,
            tolerance,
        } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = match data {
                Some(d) => Corpus::read_dir(&d)?,
                None => generate_corpus(&SynthConfig {
                    d_a: cfg.model.visual.d_a,
                    d_e: cfg.model.d_e,
                    images: 6,
                    test_images: 1,
                    ..SynthConfig::default()
                })?,
            };
            let prep = prepare(&corpus, &cfg)?;
            let batch = toy_batch(&prep.samples, 2, 2)?;
            let mut model = Model::new(cfg.model.clone(), corpus.space.num_classes());
            let report = loss_grad_check(&mut model, &batch, &prep, &cfg.train, eps)?;
            let pass = report.max_relative_error < tolerance;
            println!(
                "{}",
                json!({
                    "max_relative_error": report.max_relative_error,
                    "worst_param": report.worst_param,
                    "coordinates": report.coordinates,
                    "pass": pass,
                })
            );
            return Ok(pass);
        }
        Command::Ablate {
            common,
            embedder,
            depth,
            out,
        } => {
            let (corpus, mut cfg) = load_common(&common)?;
            if let Some(e) = embedder {
                cfg.model.embedder = e;
            }
            if let Some(d) = depth {
                anyhow::ensure!(d >= 1, "depth must be at least 1");
                cfg.model.semantic.depth = d;
            }
            let outcome = consnet::run::run_experiment(&corpus, &cfg)?;
            let text = outcome.report.to_json();
            if let Some(p) = out {
                write_text(&p, &text)?;
            }
            println!(
                "{}",
                json!({
                    "embedder": cfg.model.embedder,
                    "depth": cfg.model.semantic.depth,
                    "map_full": outcome.report.map_full,
                    "map_seen": outcome.report.map_seen,
                    "map_unseen": outcome.report.map_unseen,
                    "map_rare": outcome.report.map_rare,
                    "map_nonrare": outcome.report.map_nonrare,
                    "chance_map_full": outcome.chance.map_full,
                })
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_thread_pool_from_env() {
        eprintln!("{}", json!({"error": format!("{e:#}")}));
        return ExitCode::FAILURE;
    }
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", json!({"error": format!("{e:#}")}));
            ExitCode::FAILURE
        }
    }
}
