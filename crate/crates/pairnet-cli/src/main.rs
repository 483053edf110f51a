//! Command-line front end: dataset synthesis, training, evaluation,
//! prediction scoring, and diagnostic heatmap export.
//!
//! Every failure path prints a single `error: ...` line to stderr and exits
//! nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pairnet_core::eval::{dump_predictions, load_prediction_dump, report_from_dump};
use pairnet_core::inspect::inspect_image;
use pairnet_core::metrics::MetricsReport;
use pairnet_core::model::PairNetModel;
use pairnet_core::nn::checkpoint::{load_checkpoint, save_checkpoint};
use pairnet_core::oracle::{oracle_queries, EmbeddingTable};
use pairnet_core::scene::io::{load_dataset, save_dataset};
use pairnet_core::scene::synth::{synthesize, SynthConfig};
use pairnet_core::scene::Dataset;
use pairnet_core::train::{evaluate_with_config, train, TrainConfig};
use pairnet_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pairnet",
    version,
    about = "Panoptic scene-graph laboratory: synthesize data, train, evaluate, inspect"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val dataset from a config file.
    Synth {
        /// JSON file mirroring the synthesis config fields.
        #[arg(long)]
        config: PathBuf,
        /// Directory that receives train.json and val.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint, config snapshot, and run record.
    Train {
        /// JSON file mirroring the training config fields.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory holding train.json and val.json.
        #[arg(long)]
        data: PathBuf,
        /// Output directory; falls back to the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split and write a metrics report.
    Eval {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory holding train.json and val.json.
        #[arg(long)]
        data: PathBuf,
        /// Recall cutoffs, comma-separated and ascending.
        #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
        k: Vec<usize>,
        /// Report destination (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Training config snapshot; defaults to config.json beside the
        /// checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Which split to evaluate.
        #[arg(long, default_value = "val")]
        split: String,
        /// Also write ranked predictions (preds.json + preds.masks) next to
        /// the report, in the format `report` consumes.
        #[arg(long)]
        dump: bool,
    },
    /// Render pair matrices and decoder attention for one image as PGM.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Image id to render, e.g. val-0003.
        #[arg(long)]
        image: String,
        #[arg(long)]
        out: PathBuf,
        /// Training config snapshot; defaults to config.json beside the
        /// checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a prediction dump against ground-truth annotations.
    Report {
        /// preds.json written by `eval --dump`.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory holding the ground-truth split files.
        #[arg(long)]
        gt: PathBuf,
        /// Recall cutoffs, comma-separated and ascending.
        #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
        k: Vec<usize>,
        /// Which split the predictions cover.
        #[arg(long, default_value = "val")]
        split: String,
        /// Mask IoU threshold for a hit.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also report recall under maximum-matching claiming.
        #[arg(long)]
        optimal: bool,
        /// Where to write the report JSON; stdout table is printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_split(data_dir: &Path, split: &str) -> Result<Dataset> {
    let path = data_dir.join(format!("{split}.json"));
    let outcome = load_dataset(&path)?;
    for r in &outcome.rejected {
        eprintln!("warning: dropped image {}: {}", r.image_id, r.reason);
    }
    Ok(outcome.dataset)
}

/// Recovers the training config for a checkpoint: an explicit path wins,
/// otherwise config.json in the checkpoint's directory.
fn config_for_checkpoint(ckpt: &Path, explicit: Option<&Path>) -> Result<TrainConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("config.json"),
    };
    let cfg: TrainConfig = read_json(&path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(ckpt: &Path, cfg: &TrainConfig) -> Result<PairNetModel> {
    let mut model = PairNetModel::new(cfg.model.clone(), cfg.seed)?;
    load_checkpoint(&mut model.store, ckpt)?;
    Ok(model)
}

fn render_report(report: &MetricsReport) -> String {
    let mut lines = Vec::new();
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.4}"),
        None => "absent".to_string(),
    };
    lines.push(format!(
        "images evaluated: {} ({} with relations)",
        report.image_count, report.relation_image_count
    ));
    lines.push(format!("{:<24} {:>8}", "metric", "value"));
    for (k, v) in &report.recall_at_k {
        lines.push(format!("{:<24} {:>8.4}", format!("R@{k}"), v));
    }
    for (k, v) in &report.mean_recall_at_k {
        lines.push(format!("{:<24} {:>8.4}", format!("mR@{k}"), v));
    }
    for (k, v) in &report.pair_recall_at_k {
        lines.push(format!("{:<24} {:>8.4}", format!("pair-R@{k}"), v));
    }
    for (k, c) in &report.categorical_recall_at_k {
        lines.push(format!(
            "{:<24} tt={} ts={} st={} ss={}",
            format!("category-R@{k}"),
            fmt(c.tt),
            fmt(c.ts),
            fmt(c.st),
            fmt(c.ss)
        ));
    }
    if let Some(opt) = &report.optimal_recall_at_k {
        for (k, v) in opt {
            lines.push(format!("{:<24} {:>8.4}", format!("optimal-R@{k}"), v));
        }
    }
    if let Some(d) = &report.detector {
        lines.push(format!("{:<24} {:>8.4}", "subject IoU", d.subject_iou));
        lines.push(format!("{:<24} {:>8.4}", "object IoU", d.object_iou));
        lines.push(format!("{:<24} {:>8.4}", "subject recall@0.5", d.subject_recall_05));
        lines.push(format!("{:<24} {:>8.4}", "object recall@0.5", d.object_recall_05));
    }
    if let Some(pq) = report.panoptic_quality {
        lines.push(format!("{:<24} {:>8.4}", "panoptic quality", pq));
    }
    lines.join("\n")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out } => {
            let cfg: SynthConfig = read_json(&config)?;
            let output = synthesize(&cfg)?;
            std::fs::create_dir_all(&out)?;
            save_dataset(&output.train, &out.join("train.json"))?;
            save_dataset(&output.val, &out.join("val.json"))?;
            println!(
                "wrote {} train and {} val images to {}",
                output.train.scenes.len(),
                output.val.scenes.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { config, data, out } => {
            let cfg: TrainConfig = read_json(&config)?;
            cfg.validate()?;
            let out_dir = out
                .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
                .ok_or_else(|| {
                    Error::config("no output directory: pass --out or set out_dir".to_string())
                })?;
            let train_data = load_split(&data, "train")?;
            let val_data = load_split(&data, "val")?;
            let outputs = train(&cfg, &train_data, &val_data)?;

            std::fs::create_dir_all(&out_dir)?;
            save_checkpoint(&outputs.model.store, &out_dir.join("checkpoint.pnet"))?;
            write_json(&out_dir.join("config.json"), &cfg)?;
            write_json(&out_dir.join("run_record.json"), &outputs.record)?;

            for e in &outputs.record.epochs {
                let first_k = e.metrics.recall_at_k.iter().next();
                let recall = first_k
                    .map(|(k, v)| format!("R@{k} {v:.4}"))
                    .unwrap_or_default();
                println!(
                    "epoch {:>3}: loss {:.4}, pair loss {:.4}, {recall}",
                    e.epoch, e.mean_total, e.mean_ppn
                );
            }
            println!(
                "trained {} steps in {:.1}s; artifacts in {}",
                outputs.record.step_losses.len(),
                outputs.record.wall_clock_seconds,
                out_dir.display()
            );
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            k,
            out,
            config,
            split,
            dump,
        } => {
            let cfg = config_for_checkpoint(&ckpt, config.as_deref())?;
            let model = load_model(&ckpt, &cfg)?;
            let dataset = load_split(&data, &split)?;
            let outputs = evaluate_with_config(&model, &cfg, &dataset, &k)?;
            write_json(&out, &outputs.report)?;
            if dump {
                let dir = out.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
                let ids: Vec<String> =
                    dataset.scenes.iter().map(|s| s.image_id.clone()).collect();
                dump_predictions(
                    &dir.join("preds.json"),
                    &dir.join("preds.masks"),
                    &ids,
                    &outputs.predictions,
                )?;
                println!("wrote predictions to {}", dir.join("preds.json").display());
            }
            println!("{}", render_report(&outputs.report));
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::Inspect {
            ckpt,
            data,
            image,
            out,
            config,
        } => {
            let cfg = config_for_checkpoint(&ckpt, config.as_deref())?;
            let model = load_model(&ckpt, &cfg)?;
            let mut found = None;
            for split in ["val", "train"] {
                let path = data.join(format!("{split}.json"));
                if !path.exists() {
                    continue;
                }
                let dataset = load_split(&data, split)?;
                if let Some(i) = dataset.scenes.iter().position(|s| s.image_id == image) {
                    found = Some((dataset, i));
                    break;
                }
            }
            let (dataset, i) =
                found.ok_or_else(|| Error::NotFound(format!("image {image}")))?;
            let table = EmbeddingTable::new(
                cfg.model.object_classes,
                cfg.model.n_obj,
                cfg.model.width,
                cfg.oracle.seed,
            )?;
            let qs = oracle_queries(&dataset.scenes[i], &table, &cfg.oracle)?.query_set;
            let outputs = inspect_image(&model, &dataset.scenes[i], &dataset.graphs[i], &qs, &out)?;
            for f in &outputs.files {
                println!("wrote {}", f.display());
            }
            println!("wrote {}", outputs.sidecar_path.display());
            Ok(())
        }
        Command::Report {
            pred,
            gt,
            k,
            split,
            iou,
            optimal,
            out,
        } => {
            let dumps = load_prediction_dump(&pred)?;
            let mask_dir = pred.parent().unwrap_or_else(|| Path::new("."));
            let dataset = load_split(&gt, &split)?;
            let report = report_from_dump(&dumps, mask_dir, &dataset, &k, iou, optimal)?;
            if let Some(path) = &out {
                write_json(path, &report)?;
                println!("report written to {}", path.display());
            } else {
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
            println!("{}", render_report(&report));
            Ok(())
        }
    }
}
