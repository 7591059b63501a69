//! The `dapt` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::analysis::{
    cbtfidf_topics, cluster_embeddings, export_cls_embeddings, project_2d, topic_report,
};
use crate::analysis::{write_projection_csv, write_topic_csv};
use crate::checkpoint::Checkpoint;
use crate::config::{extract_overrides, RunConfig, RunManifest};
use crate::corpus::{
    load_corpus, split_corpus, write_corpus, DatasetSplits, Document, LabelScheme,
};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate_checkpoint, scaling_study, write_scaling_csv, ScalingData};
use crate::model::{predict_top_k, ModelConfig};
use crate::synthetic;
use crate::tokenizer::{Preset, Tokenizer};
use crate::training::{
    encode_examples, evaluation_steps, finetune_classifier, hyperparameter_grid, pretrain_mlm,
    tokenize_and_pack, write_grid_csv, write_loss_history, CheckpointSink, Init, Task,
};

#[derive(Debug, Parser)]
#[command(
    name = "dapt",
    version,
    about = "Domain-adaptive pre-training pipeline",
    after_help = "Any configuration key may also be passed as --<key> <value>, overriding the config file."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Roberta,
    Scibert,
    Toy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a byte-level BPE tokenizer on a JSON-lines corpus.
    TokenizerTrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Target vocabulary size (overrides the preset's size).
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long, value_enum, default_value = "toy")]
        preset: PresetArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-LM pre-training; with --init, continued pre-training.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Tokenizer directory (required without --init).
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Directory of split manifests to reuse.
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a classifier from a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fine-tuned checkpoint on one split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Directory for metrics files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show the most likely fillers for the single <mask> in a text.
    MaskPredict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Hold-out log-loss against training-set fraction for several inits.
    ScaleStudy {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated ascending fractions.
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.25,1.0")]
        fractions: Vec<f64>,
        /// Comma-separated `name=checkpoint` pairs.
        #[arg(long, value_delimiter = ',', required = true)]
        inits: Vec<String>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "binary")]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learning-rate × batch-size fine-tuning grid.
    Grid {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "binary")]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed, project, cluster and summarise documents by topic.
    Topics {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "finetune_validation")]
        split: String,
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        sample: usize,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic demonstration corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        labeled: usize,
        #[arg(long, default_value_t = 400)]
        unlabeled: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// Parses arguments (program name first) and runs the command.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> Result<()> {
    let (rest, overrides) = extract_overrides(args.into_iter().collect());
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            let msg = msg
                .trim_end()
                .strip_prefix("error: ")
                .unwrap_or(msg.trim_end());
            return Err(Error::Usage(msg.to_string()));
        }
    };
    execute(cli.command, &overrides)
}

fn config_for(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let cfg = RunConfig::load(path, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_splits(
    corpus: &Path,
    splits: Option<&Path>,
    cfg: &RunConfig,
) -> Result<(Vec<Document>, DatasetSplits)> {
    let docs = load_corpus(corpus, &LabelScheme::osti())?;
    let split = match splits {
        Some(dir) => DatasetSplits::from_manifests(&docs, dir)?,
        None => split_corpus(&docs, &cfg.split)?,
    };
    Ok((docs, split))
}

fn task_for(arg: TaskArg, splits: &DatasetSplits) -> Result<Task> {
    match arg {
        TaskArg::Binary => Ok(Task::Binary),
        TaskArg::Multiclass => {
            let labeled: Vec<Document> = splits
                .finetune_train
                .iter()
                .chain(&splits.finetune_validation)
                .chain(&splits.test)
                .cloned()
                .collect();
            Task::multiclass_from(&labeled)
        }
    }
}

fn finish(mut manifest: RunManifest, out: &Path, started: Instant) -> Result<()> {
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    let path = manifest.write(out)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn execute(command: Command, overrides: &[(String, String)]) -> Result<()> {
    let started = Instant::now();
    match command {
        Command::TokenizerTrain {
            corpus,
            vocab_size,
            preset,
            out,
        } => {
            let preset = match preset {
                PresetArg::Roberta => Preset::Roberta,
                PresetArg::Scibert => Preset::SciBert,
                PresetArg::Toy => Preset::Toy,
            };
            let docs = load_corpus(&corpus, &LabelScheme::osti())?;
            let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
            let tok = Tokenizer::train_with_casing(
                &texts,
                vocab_size.unwrap_or_else(|| preset.vocab_size()),
                preset.lowercase(),
            )?;
            create_dir(&out)?;
            tok.save(&out)?;
            println!(
                "trained tokenizer: {} tokens, fingerprint {}",
                tok.vocab_size(),
                tok.fingerprint()
            );
            let mut manifest = RunManifest::new("tokenizer-train", &RunConfig::default());
            manifest.add_input("corpus", &corpus)?;
            manifest.outputs = vec![out.join("vocab.txt"), out.join("merges.txt")];
            finish(manifest, &out, started)
        }

        Command::Pretrain {
            config,
            corpus,
            tokenizer,
            init,
            splits,
            out,
        } => {
            let cfg = config_for(config.as_deref(), overrides)?;
            let (init_ckpt, tok) = match (&init, &tokenizer) {
                (Some(p), explicit) => {
                    let ck = Checkpoint::load(p)?;
                    let tok = match explicit {
                        Some(dir) => {
                            let t = Tokenizer::load(dir)?;
                            ck.check_tokenizer(&t)?;
                            t
                        }
                        None => ck.tokenizer()?,
                    };
                    (Some(ck), tok)
                }
                (None, Some(dir)) => (None, Tokenizer::load(dir)?),
                (None, None) => return Err(invalid("pretrain needs --tokenizer or --init")),
            };
            let docs = load_corpus(&corpus, &LabelScheme::osti())?;
            let split = match &splits {
                Some(dir) => DatasetSplits::from_manifests(&docs, dir)?,
                None if !docs.iter().any(Document::is_labeled) => {
                    log::warn!("corpus has no labeled documents; pre-training on all of it without validation");
                    DatasetSplits {
                        pretrain: docs,
                        ..DatasetSplits::default()
                    }
                }
                None => split_corpus(&docs, &cfg.split)?,
            };
            let segment_length = cfg.segment_length;
            let segments = tokenize_and_pack(&tok, &split.pretrain, segment_length)?;
            let validation = if split.finetune_validation.is_empty() {
                Vec::new()
            } else {
                tokenize_and_pack(&tok, &split.finetune_validation, segment_length)?
            };
            let start = match init_ckpt {
                Some(ck) => Init::Existing(ck.model),
                None => Init::Fresh {
                    config: ModelConfig {
                        vocab_size: tok.vocab_size(),
                        ..cfg.model.clone()
                    },
                    seed: cfg.model_seed,
                },
            };
            log::info!(
                "pre-training on {} segments of up to {segment_length} tokens",
                segments.len()
            );
            let result = pretrain_mlm(&cfg.training, &cfg.masking, &segments, &validation, start)?;

            create_dir(&out.join("checkpoints"))?;
            split.write_manifests(&out.join("splits"))?;
            write_text(&out.join("config.txt"), &cfg.to_text())?;
            write_loss_history(&out.join("loss_history.csv"), &result.history)?;
            let final_path = out.join("checkpoints").join("final.ckpt");
            Checkpoint::new(result.model, &tok).save(&final_path)?;
            if let Some(last) = result.history.last() {
                println!(
                    "final train loss {:.4}{}",
                    last.train_loss,
                    last.validation_loss
                        .map(|v| format!(", validation loss {v:.4}"))
                        .unwrap_or_default()
                );
            }
            println!("checkpoint: {}", final_path.display());

            let mut manifest = RunManifest::new("pretrain", &cfg);
            manifest.add_input("corpus", &corpus)?;
            if let Some(p) = &init {
                manifest.add_input("init", p)?;
            }
            if let Some(dir) = &tokenizer {
                manifest.add_input("tokenizer", dir)?;
            }
            manifest
                .inputs
                .insert("tokenizer_fingerprint".into(), tok.fingerprint());
            manifest.outputs = vec![
                final_path,
                out.join("loss_history.csv"),
                out.join("config.txt"),
            ];
            finish(manifest, &out, started)
        }

        Command::Finetune {
            config,
            task,
            init,
            corpus,
            splits,
            out,
        } => {
            let cfg = config_for(config.as_deref(), overrides)?;
            let ck = Checkpoint::load(&init)?;
            let tok = ck.tokenizer()?;
            let (_, split) = load_splits(&corpus, splits.as_deref(), &cfg)?;
            let task = task_for(task, &split)?;
            let max_len = cfg.training.max_seq_len.min(ck.model.config.max_positions);
            let train = encode_examples(&tok, &split.finetune_train, &task, max_len)?;
            let validation = encode_examples(&tok, &split.finetune_validation, &task, max_len)?;
            evaluation_steps(
                cfg.training.resolved_steps(train.len()),
                cfg.training.eval_checkpoints,
            )?;
            let ckpt_dir = out.join("checkpoints");
            create_dir(&ckpt_dir)?;
            let result = finetune_classifier(
                &cfg.training,
                &ck.model,
                &task,
                &train,
                &validation,
                Some(CheckpointSink {
                    dir: &ckpt_dir,
                    tokenizer: &tok,
                }),
            )?;
            let best_path = out.join("best.ckpt");
            Checkpoint::new(result.model.clone(), &tok).save(&best_path)?;
            split.write_manifests(&out.join("splits"))?;
            write_text(&out.join("config.txt"), &cfg.to_text())?;
            write_loss_history(&out.join("loss_history.csv"), &result.history)?;
            let meta = serde_json::to_string_pretty(&result.checkpoints)
                .map_err(|e| Error::Format(e.to_string()))?;
            write_text(&out.join("checkpoints.json"), &meta)?;
            result
                .validation_metrics
                .write(&out.join("metrics"), "validation")?;
            println!(
                "best checkpoint: step {} (validation loss {:.5})",
                result.best().step,
                result.best().validation_loss
            );
            print!("{}", result.validation_metrics.to_table());

            let mut manifest = RunManifest::new("finetune", &cfg);
            manifest.add_input("corpus", &corpus)?;
            manifest.add_input("init", &init)?;
            manifest
                .inputs
                .insert("tokenizer_fingerprint".into(), tok.fingerprint());
            manifest.outputs = vec![
                best_path,
                out.join("checkpoints.json"),
                out.join("metrics/validation.json"),
            ];
            finish(manifest, &out, started)
        }

        Command::Eval {
            config,
            checkpoint,
            corpus,
            split: split_name,
            task,
            splits,
            out,
        } => {
            let cfg = config_for(config.as_deref(), overrides)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let tok = ck.tokenizer()?;
            let (_, split) = load_splits(&corpus, splits.as_deref(), &cfg)?;
            let task = task_for(task, &split)?;
            let docs = split.get(&split_name)?;
            let max_len = cfg.training.max_seq_len.min(ck.model.config.max_positions);
            let report = evaluate_checkpoint(&ck, &tok, docs, &task, max_len, cfg.eval_batch_size)?;
            print!("{}", report.to_table());
            if let Some(dir) = out {
                report.write(&dir, &split_name)?;
                let mut manifest = RunManifest::new("eval", &cfg);
                manifest.add_input("corpus", &corpus)?;
                manifest.add_input("checkpoint", &checkpoint)?;
                manifest.outputs = vec![dir.join(format!("{split_name}.json"))];
                finish(manifest, &dir, started)?;
            }
            Ok(())
        }

        Command::MaskPredict {
            checkpoint,
            text,
            k,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let tok = ck.tokenizer()?;
            let rows = predict_top_k(&ck.model, &tok, &text, k)?;
            println!("rank\ttoken\tscore");
            for (i, (token, score)) in rows.iter().enumerate() {
                println!("{}\t{}\t{:.6}", i + 1, token, score);
            }
            Ok(())
        }

        Command::ScaleStudy {
            config,
            fractions,
            inits,
            corpus,
            splits,
            task,
            out,
        } => {
            let cfg = config_for(config.as_deref(), overrides)?;
            let named: Vec<(String, PathBuf)> = inits
                .iter()
                .map(|s| {
                    s.split_once('=')
                        .map(|(n, p)| (n.to_string(), PathBuf::from(p)))
                        .ok_or_else(|| invalid(format!("--inits entry {s:?} is not name=path")))
                })
                .collect::<Result<_>>()?;
            let mut models = Vec::new();
            let mut tok: Option<Tokenizer> = None;
            for (name, path) in &named {
                let ck = Checkpoint::load(path)?;
                match &tok {
                    Some(t) => ck.check_tokenizer(t)?,
                    None => tok = Some(ck.tokenizer()?),
                }
                models.push((name.clone(), ck.model));
            }
            let tok = tok.ok_or_else(|| invalid("no inits given"))?;
            let (_, split) = load_splits(&corpus, splits.as_deref(), &cfg)?;
            let task = task_for(task, &split)?;
            let result = scaling_study(
                &cfg.training,
                &fractions,
                &models,
                ScalingData {
                    tokenizer: &tok,
                    task: &task,
                    train: &split.finetune_train,
                    validation: &split.finetune_validation,
                    holdout: &split.test,
                },
                cfg.split.seed,
            )?;
            create_dir(&out)?;
            let csv = out.join("scaling.csv");
            write_scaling_csv(&csv, &result.rows)?;
            write_text(&out.join("config.txt"), &cfg.to_text())?;
            println!("init\tfraction\ttrain_size\tlog_loss");
            for r in &result.rows {
                println!(
                    "{}\t{}\t{}\t{:.5}",
                    r.init_name, r.fraction, r.train_size, r.log_loss
                );
            }
            let mut manifest = RunManifest::new("scale-study", &cfg);
            manifest.add_input("corpus", &corpus)?;
            for (name, path) in &named {
                manifest.add_input(&format!("init:{name}"), path)?;
            }
            manifest.outputs = vec![csv];
            finish(manifest, &out, started)
        }

        Command::Grid {
            config,
            init,
            corpus,
            splits,
            task,
            out,
        } => {
            let cfg = config_for(config.as_deref(), overrides)?;
            let ck = Checkpoint::load(&init)?;
            let tok = ck.tokenizer()?;
            let (_, split) = load_splits(&corpus, splits.as_deref(), &cfg)?;
            let task = task_for(task, &split)?;
            let max_len = cfg.training.max_seq_len.min(ck.model.config.max_positions);
            let train = encode_examples(&tok, &split.finetune_train, &task, max_len)?;
            let validation = encode_examples(&tok, &split.finetune_validation, &task, max_len)?;
            let rows = hyperparameter_grid(
                &cfg.training,
                &cfg.grid_learning_rates,
                &cfg.grid_batch_sizes,
                &ck.model,
                &task,
                &train,
                &validation,
            )?;
            create_dir(&out)?;
            let csv = out.join("grid.csv");
            write_grid_csv(&csv, &rows)?;
            write_text(&out.join("config.txt"), &cfg.to_text())?;
            println!("learning_rate\tbatch_size\taccuracy\tf1\tloss\tstatus");
            for r in &rows {
                println!(
                    "{:e}\t{}\t{:.4}\t{:.4}\t{:.5}\t{}",
                    r.learning_rate, r.batch_size, r.accuracy, r.f1, r.loss, r.status
                );
            }
            let mut manifest = RunManifest::new("grid", &cfg);
            manifest.add_input("corpus", &corpus)?;
            manifest.add_input("init", &init)?;
            manifest.outputs = vec![csv];
            finish(manifest, &out, started)
        }

        Command::Topics {
            config,
            checkpoint,
            corpus,
            split: split_name,
            splits,
            sample,
            top_k,
            out,
        } => {
            let cfg = config_for(config.as_deref(), overrides)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let tok = ck.tokenizer()?;
            let (_, split) = load_splits(&corpus, splits.as_deref(), &cfg)?;
            let docs = split.get(&split_name)?;
            let sample = if sample > docs.len() {
                log::warn!(
                    "sample {sample} exceeds the {} documents in {split_name}; using all",
                    docs.len()
                );
                docs.len()
            } else {
                sample
            };
            let embeddings = export_cls_embeddings(
                &ck,
                &tok,
                docs,
                sample,
                cfg.training.seed,
                cfg.training.max_seq_len,
            )?;
            let coords = project_2d(&embeddings)?;
            let assignment = cluster_embeddings(&embeddings, &cfg.cluster)?;
            let summary = cbtfidf_topics(&assignment, docs, top_k)?;
            let labels: Vec<Option<String>> = embeddings
                .ids
                .iter()
                .map(|id| {
                    docs.iter()
                        .find(|d| &d.id == id)
                        .and_then(|d| d.nfc_label)
                        .map(|l| {
                            if l {
                                "nfc".to_string()
                            } else {
                                "other".to_string()
                            }
                        })
                })
                .collect();
            create_dir(&out)?;
            embeddings.save(&out.join("embeddings.txt"))?;
            write_projection_csv(&out.join("projection.csv"), &assignment, &coords, &labels)?;
            write_topic_csv(&out.join("topics.csv"), &summary)?;
            write_text(&out.join("config.txt"), &cfg.to_text())?;
            println!(
                "{} documents, {} clusters, {} outliers",
                assignment.ids.len(),
                assignment.n_clusters,
                assignment.outliers()
            );
            print!("{}", topic_report(&summary));
            let mut manifest = RunManifest::new("topics", &cfg);
            manifest.add_input("corpus", &corpus)?;
            manifest.add_input("checkpoint", &checkpoint)?;
            manifest.outputs = vec![
                out.join("embeddings.txt"),
                out.join("projection.csv"),
                out.join("topics.csv"),
            ];
            finish(manifest, &out, started)
        }

        Command::Synth {
            out,
            labeled,
            unlabeled,
            seed,
        } => {
            let docs = synthetic::demo_corpus(labeled, unlabeled, seed)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write_corpus(&out, &docs)?;
            println!("wrote {} documents to {}", docs.len(), out.display());
            Ok(())
        }
    }
}

/// Process exit code for a result: 0 success, 1 invalid input or
/// configuration, 2 runtime or numerical failure.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_validation() => 1,
        Err(_) => 2,
    }
}
