use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psydef::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION};
use psydef::config::PipelineConfig;
use psydef::io::{load_catalog, load_corpus, load_supplementary, read_jsonl, write_json, write_jsonl};
use psydef::pipeline::{
    analyze, augment, build_emotion, build_encoder, build_generator, build_nli, build_rows, identify_stressors,
    predict_rows, quality_control, restore_encoder, run_pipeline, score_predictions, write_history, GoldRecord,
    PipelineError, PredictionRecord, Stage, StageOutcome,
};
use psydef::report::{write_analysis, write_metrics, write_qc};
use psydef_core::augmentor::SyntheticSample;
use psydef_core::backends::TextEncoder;
use psydef_core::features::FeatureRow;
use psydef_core::fusion::train;
use psydef_core::stressor::StressorRecord;
use psydef_core::Label;

#[derive(Parser)]
#[command(name = "psydef", version, about = "Defense-mechanism classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run pipeline stages from a config file, skipping up-to-date ones.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `all` or a comma-separated list, e.g. `features,train`.
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Identify the stressor behind every labeled seeker turn.
    Stressor {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate synthetic samples for the minority classes.
    Augment {
        /// Training dialogues (the class counts come from here).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        stressors: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        supplementary: PathBuf,
        /// `x<k>` or `cap:<n>[:synthetic]`; overrides the config.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score and gate synthetic samples.
    Qc {
        #[arg(long = "in")]
        input: PathBuf,
        /// Training dialogues, used to fit the centroid annotator.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        supplementary: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build feature rows for real turns and, optionally, synthetic samples.
    Features {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        stressors: PathBuf,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the fusion classifier and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Catalog the rows were built with; recorded as a fingerprint.
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against gold labels matched by id.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        sink_label: u8,
    },
    /// Predict labels for feature rows with a trained checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dialogue analytics and plot-data tables.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Feature rows for the mechanism-activation table.
        #[arg(long, requires = "catalog")]
        features: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Config file settings, or defaults when no file is given. Paths in the
/// file are ignored by the single-stage commands.
fn settings(config: Option<&Path>) -> Result<PipelineConfig, PipelineError> {
    match config {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::with_paths(
            PathBuf::new(),
            PathBuf::new(),
            PathBuf::new(),
            PathBuf::new(),
        )),
    }
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Run { config, stages } => {
            let cfg = PipelineConfig::load(&config)?;
            let summary = run_pipeline(&cfg, &Stage::parse_list(&stages)?)?;
            for (stage, outcome) in &summary.stages {
                match outcome {
                    StageOutcome::Skipped => println!("{stage}: skipped (up to date)"),
                    StageOutcome::Ran(reasons) => println!("{stage}: ran ({})", reasons.join("; ")),
                }
            }
        }
        Command::Stressor { input, out, config } => {
            let cfg = settings(config.as_deref())?;
            let dialogues = load_corpus(&input)?;
            let generator = build_generator(&cfg.backends);
            let records = identify_stressors(&dialogues, &*generator, &cfg.stressor, cfg.seed)?;
            write_jsonl(&out, &records)?;
        }
        Command::Augment {
            corpus,
            stressors,
            catalog,
            supplementary,
            strategy,
            out,
            config,
        } => {
            let mut cfg = settings(config.as_deref())?;
            if let Some(s) = strategy {
                cfg.augment.strategy = s;
            }
            let train = load_corpus(&corpus)?;
            let stressors: Vec<StressorRecord> = read_jsonl(&stressors)?;
            let generator = build_generator(&cfg.backends);
            let output = augment(
                &train,
                &stressors,
                &load_catalog(&catalog)?,
                &load_supplementary(&supplementary)?,
                &cfg.augment,
                cfg.stressor.history_cap,
                &*generator,
                cfg.seed,
            )?;
            write_jsonl(&out, &output.samples)?;
            write_json(&out.with_extension("plan.json"), &output)?;
        }
        Command::Qc {
            input,
            corpus,
            catalog,
            supplementary,
            out,
            config,
        } => {
            let cfg = settings(config.as_deref())?;
            let samples: Vec<SyntheticSample> = read_jsonl(&input)?;
            let nli = build_nli(&cfg.backends);
            let encoder = build_encoder(&cfg.backends);
            let (report, accepted) = quality_control(
                samples,
                &load_corpus(&corpus)?,
                &load_catalog(&catalog)?,
                &load_supplementary(&supplementary)?,
                &cfg.qc,
                &*nli,
                &encoder,
            )?;
            write_qc(&out, &report)?;
            write_jsonl(&out.join("accepted.jsonl"), &accepted)?;
            print!("{}", report.summary_text());
            let rejected = report.rejected_batches();
            if rejected > 0 && cfg.qc.halt_on_reject {
                return Err(PipelineError::QcHalt {
                    rejected,
                    batches: report.batches.len(),
                    report: out.join("qc_summary.txt"),
                });
            }
        }
        Command::Features {
            corpus,
            stressors,
            synthetic,
            catalog,
            out,
            config,
        } => {
            let cfg = settings(config.as_deref())?;
            let stressors: Vec<StressorRecord> = read_jsonl(&stressors)?;
            let synthetic: Vec<SyntheticSample> = match synthetic {
                Some(p) => read_jsonl(&p)?,
                None => Vec::new(),
            };
            let nli = build_nli(&cfg.backends);
            let emotion = build_emotion(&cfg.backends);
            let rows = build_rows(
                &load_corpus(&corpus)?,
                &stressors,
                &synthetic,
                &load_catalog(&catalog)?,
                &*nli,
                &*emotion,
                &cfg.features,
            )?;
            write_jsonl(&out, &rows)?;
        }
        Command::Train {
            config,
            train: train_path,
            dev,
            catalog,
            out,
        } => {
            let cfg = settings(config.as_deref())?;
            cfg.fusion.validate().map_err(|e| PipelineError::Invalid(e.to_string()))?;
            let train_rows: Vec<FeatureRow> = read_jsonl(&train_path)?;
            let dev_rows: Vec<FeatureRow> = read_jsonl(&dev)?;
            let mut encoder = build_encoder(&cfg.backends);
            let (model, history) = train(&train_rows, &dev_rows, &cfg.fusion, &mut encoder)
                .map_err(|e| PipelineError::Invalid(format!("train: {e}")))?;
            let fingerprint = match catalog {
                Some(p) => load_catalog(&p)?.fingerprint(),
                None => String::new(),
            };
            let trainable = encoder.trainable_params();
            let ckpt = Checkpoint {
                model,
                history,
                meta: CheckpointMeta {
                    format_version: FORMAT_VERSION,
                    catalog_fingerprint: fingerprint,
                    encoder: encoder.meta(),
                },
                encoder_params: (!trainable.is_empty()).then(|| trainable.to_vec()),
            };
            save_checkpoint(&out, &ckpt)?;
            write_history(&out.join("history.csv"), &ckpt.history)?;
            let h = &ckpt.history;
            println!(
                "trained {} epoch(s); best epoch {} with dev macro-F1 {:.4}",
                h.epochs_run(),
                h.best_epoch,
                h.dev_macro_f1.get(h.best_epoch).copied().unwrap_or(0.0)
            );
        }
        Command::Eval {
            preds,
            gold,
            out,
            sink_label,
        } => {
            let sink = Label::new(sink_label)
                .ok_or_else(|| PipelineError::Invalid(format!("sink label {sink_label} is outside 0..=8")))?;
            let preds: Vec<PredictionRecord> = read_jsonl(&preds)?;
            let gold: Vec<GoldRecord> = read_jsonl(&gold)?;
            let (report, sink) = score_predictions(&preds, &gold, sink)?;
            write_metrics(&out, &report, &sink)?;
            println!("accuracy {:.4}  macro-F1 {:.4}", report.accuracy, report.macro_f1);
        }
        Command::Predict {
            ckpt,
            input,
            out,
            config,
        } => {
            let cfg = settings(config.as_deref())?;
            let ckpt = load_checkpoint(&ckpt, None)?;
            let encoder = restore_encoder(&ckpt, &cfg.backends)?;
            let rows: Vec<FeatureRow> = read_jsonl(&input)?;
            write_jsonl(&out, &predict_rows(&ckpt.model, &rows, &encoder)?)?;
        }
        Command::Analyze {
            input,
            out,
            features,
            catalog,
            config,
        } => {
            let cfg = settings(config.as_deref())?;
            let dialogues = load_corpus(&input)?;
            let rows: Vec<FeatureRow> = match features {
                Some(p) => read_jsonl(&p)?,
                None => Vec::new(),
            };
            let catalog = catalog.map(|p| load_catalog(&p)).transpose()?;
            let emotion = build_emotion(&cfg.backends);
            let a = analyze(&dialogues, &rows, catalog.as_ref(), &*emotion, &cfg.features, &cfg.analysis)?;
            write_analysis(&out, &a)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

