use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use tamperdet::ablation::{default_ladder, run_ablation};
use tamperdet::datagen::{generate_dataset, noisy_auto_mask, write_dataset, DatagenConfig, TamperType};
use tamperdet::dataset::{load_samples, read_labels};
use tamperdet::inference::{
    predict_batch, read_predictions_csv, write_predictions_csv, ChannelStats, InferenceConfig,
    NormMode,
};
use tamperdet::maskops::{
    boxes_from_mask, calibrate_with_boxes, read_box_annotations, write_box_annotations, Provenance,
    PseudoMask,
};
use tamperdet::metrics::{compute_accuracy, compute_auc, MetricReport};
use tamperdet::model::ModelConfig;
use tamperdet::pipeline::{pipeline, RunConfig};
use tamperdet::raster::GrayRaster;
use tamperdet::training::{fit, load_checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "tamperdet", version, about = "Weakly-supervised image forgery detection")]
struct Cli {
    /// Root RNG seed (overrides config-file seeds where applicable).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path or directory for the selected command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormArg {
    Unit,
    Stats,
    PerImage,
}

impl From<NormArg> for NormMode {
    fn from(v: NormArg) -> NormMode {
        match v {
            NormArg::Unit => NormMode::Unit,
            NormArg::Stats => NormMode::DatasetStats,
            NormArg::PerImage => NormMode::PerImage,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tamper dataset with ground-truth masks.
    GenData {
        #[arg(long, default_value_t = 8)]
        n_real: usize,
        #[arg(long, default_value_t = 8)]
        n_fake: usize,
        /// Comma-separated subset of splice,copy_move,removal.
        #[arg(long, default_value = "splice,copy_move,removal")]
        types: String,
        #[arg(long, default_value_t = 256)]
        min_size: usize,
        #[arg(long, default_value_t = 512)]
        max_size: usize,
        /// Replace ground-truth masks with degraded automatic-style masks
        /// (dilated, with spurious blobs) and also write `boxes.csv` with
        /// tight ground-truth boxes for later calibration.
        #[arg(long)]
        noisy_masks: bool,
    },
    /// Replace automatic masks by rasterized manual boxes.
    Calibrate {
        /// Directory of mask PNGs to calibrate.
        #[arg(long)]
        masks: PathBuf,
        /// CSV of `image_id,x0,y0,x1,y1` rows.
        #[arg(long)]
        boxes: PathBuf,
    },
    /// Train a detector on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Pseudo-mask directory (defaults to `<data>/masks`).
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Training-config TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model-config TOML; defaults apply when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score every PNG in a directory with a trained checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        no_tta: bool,
        #[arg(long, value_enum, default_value_t = NormArg::Unit)]
        norm: NormArg,
        /// Channel-stats CSV (required for --norm stats).
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Resample inputs to this square size instead of native-size padding.
        #[arg(long)]
        resize: Option<usize>,
    },
    /// Compute accuracy and AUC from a predictions CSV and a labels CSV.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        /// Dataset directory containing labels.csv.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the step-by-step toggle ladder over one dataset.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Training-config TOML shared by all rows.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Full run: (optional) datagen, masks, training, prediction, metrics.
    Pipeline {
        /// Run-config TOML.
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_types(spec: &str) -> anyhow::Result<Vec<TamperType>> {
    spec.split(',')
        .map(|s| TamperType::parse(s.trim()).map_err(Into::into))
        .collect()
}

fn load_model_config(path: Option<&PathBuf>) -> anyhow::Result<ModelConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text)?
        }
        None => ModelConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_train_config(path: Option<&PathBuf>, seed: Option<u64>) -> anyhow::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn require_out(out: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    out.ok_or_else(|| anyhow::anyhow!("--out is required for this command"))
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let seed = cli.seed;
    match cli.command {
        Command::GenData {
            n_real,
            n_fake,
            types,
            min_size,
            max_size,
            noisy_masks,
        } => {
            let out = require_out(cli.out)?;
            let cfg = DatagenConfig {
                n_real,
                n_fake,
                min_size,
                max_size,
                types: parse_types(&types)?,
                ..DatagenConfig::default()
            };
            let seed = seed.unwrap_or(0);
            let mut records = generate_dataset(&cfg, seed)?;
            if noisy_masks {
                let anns: Vec<_> = records
                    .iter()
                    .filter(|r| r.label == 1)
                    .map(|r| boxes_from_mask(&r.gt_mask, &r.id))
                    .collect();
                for (i, r) in records.iter_mut().enumerate() {
                    if r.label == 1 {
                        r.gt_mask = noisy_auto_mask(&r.gt_mask, seed.wrapping_add(i as u64));
                    }
                }
                write_dataset(&out, &records)?;
                write_box_annotations(&out.join("boxes.csv"), &anns)?;
            } else {
                write_dataset(&out, &records)?;
            }
            println!("wrote {} images to {}", records.len(), out.display());
        }
        Command::Calibrate { masks, boxes } => {
            let out = require_out(cli.out)?;
            std::fs::create_dir_all(&out)?;
            let anns = read_box_annotations(&boxes)?;
            let mut files: Vec<_> = std::fs::read_dir(&masks)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
                .collect();
            files.sort();
            let mut calibrated = 0usize;
            for path in files {
                let id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let gray = GrayRaster::load_png(&path)?;
                let mask = PseudoMask::from_gray(&gray, Provenance::Auto, &id);
                let result = match anns.get(&id) {
                    Some(ann) => {
                        calibrated += 1;
                        calibrate_with_boxes(&mask, ann)?
                    }
                    None => mask,
                };
                result.to_gray().save_png(&out.join(format!("{id}.png")))?;
            }
            println!("calibrated {calibrated} masks into {}", out.display());
        }
        Command::Train {
            data,
            masks,
            config,
            model,
        } => {
            let out = require_out(cli.out)?;
            let tc = load_train_config(config.as_ref(), seed)?;
            let mc = load_model_config(model.as_ref())?;
            let masks_dir = masks.unwrap_or_else(|| data.join("masks"));
            let samples = load_samples(&data, Some(&masks_dir), Provenance::Auto)?;
            let state = fit(&samples, &tc, &mc, Some(&out))?;
            let last = state
                .loss_history
                .last()
                .map(|e| e.loss_total)
                .unwrap_or(f64::NAN);
            println!(
                "trained {} epochs, final loss {last:.6}, checkpoint at {}",
                state.epoch,
                out.join("last.json").display()
            );
        }
        Command::Predict {
            ckpt,
            images,
            no_tta,
            norm,
            stats,
            threshold,
            resize,
        } => {
            let out = require_out(cli.out)?;
            let state = load_checkpoint(&ckpt)?;
            let cfg = InferenceConfig {
                no_resize: resize.is_none(),
                resize_to: resize.unwrap_or(256),
                normalization: norm.into(),
                tta: !no_tta,
                decision_threshold: threshold,
                ..InferenceConfig::default()
            };
            let stats = match (cfg.normalization, stats) {
                (NormMode::DatasetStats, Some(p)) => Some(ChannelStats::read_csv(&p)?),
                (NormMode::DatasetStats, None) => {
                    bail!("--norm stats requires --stats FILE")
                }
                _ => None,
            };
            let (preds, summary, failures) = predict_batch(&images, &state, &cfg, stats.as_ref())?;
            for (id, err) in &failures {
                eprintln!("warning: could not score `{id}`: {err}");
            }
            write_predictions_csv(&out, &preds)?;
            println!(
                "scored {} images (mean latency {:.1} ms) -> {}",
                summary.count,
                summary.mean_latency_ms,
                out.display()
            );
        }
        Command::Eval { predictions, data } => {
            let preds = read_predictions_csv(&predictions)?;
            let truth: std::collections::BTreeMap<String, u8> = read_labels(&data)?
                .into_iter()
                .map(|r| (r.id, r.label))
                .collect();
            let mut acc_pairs = Vec::new();
            let mut auc_pairs = Vec::new();
            let mut latency = 0.0;
            for p in &preds {
                if let Some(&t) = truth.get(&p.image_id) {
                    acc_pairs.push((p.label, t));
                    auc_pairs.push((p.score, t));
                    latency += p.elapsed_ms;
                }
            }
            if acc_pairs.is_empty() {
                bail!("no predictions match the label file");
            }
            let report = MetricReport {
                accuracy: compute_accuracy(&acc_pairs)?,
                auc: compute_auc(&auc_pairs)?,
                n: acc_pairs.len(),
                mean_latency_ms: latency / acc_pairs.len() as f64,
                config_fingerprint: String::new(),
            };
            let json = serde_json::to_string_pretty(&report)?;
            match cli.out {
                Some(out) => {
                    std::fs::write(&out, &json)?;
                    println!("wrote {}", out.display());
                }
                None => println!("{json}"),
            }
        }
        Command::Ablate {
            data,
            config,
            model,
        } => {
            let out = require_out(cli.out)?;
            let tc = load_train_config(config.as_ref(), None)?;
            let mc = load_model_config(model.as_ref())?;
            let rows = run_ablation(
                &data,
                &default_ladder(),
                &tc,
                &mc,
                seed.unwrap_or(tc.seed),
                &out,
            )?;
            for row in &rows {
                println!(
                    "{:<14} acc {:.4}  auc {:.4}",
                    row.name, row.report.accuracy, row.report.auc
                );
            }
            println!("table at {}", out.join("ablation.md").display());
        }
        Command::Pipeline { config } => {
            let out = require_out(cli.out)?;
            let mut cfg = RunConfig::from_toml_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.train.seed = s;
            }
            let report = pipeline(&cfg, &out)?;
            println!(
                "accuracy {:.4}  auc {:.4}  n {}  report at {}",
                report.accuracy,
                report.auc,
                report.n,
                out.join("report.json").display()
            );
        }
    }
    Ok(())
}
