//! Ablation harness: a ladder of pipeline-switch rows run over one dataset,
//! with training checkpoints shared between rows whose differences are
//! inference-only. Emits a markdown table plus per-row reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::TargetMode;
use crate::dataset::{load_samples, read_labels, ImageSample};
use crate::error::{Error, Result};
use crate::inference::{
    predict_batch, ChannelStats, InferenceConfig, NormMode, TtaOp,
};
use crate::maskops::{calibrate_with_boxes, read_box_annotations, Provenance};
use crate::metrics::{compute_accuracy, compute_auc, MetricReport};
use crate::model::ModelConfig;
use crate::training::{fit, save_checkpoint, TrainConfig, TrainState};

/// Every switch a ladder row may flip. Training cares only about
/// `target_mode` and `calibrated_masks`; the rest are inference-time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationToggles {
    /// Resample inputs to a fixed square at inference (the baseline the
    /// no-resize rows improve on).
    pub resize: bool,
    pub normalization: NormMode,
    pub tta: bool,
    pub target_mode: TargetMode,
    /// Replace automatic masks with box-calibrated ones (needs
    /// `train/boxes.csv` in the dataset).
    pub calibrated_masks: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles {
            resize: false,
            normalization: NormMode::Unit,
            tta: false,
            target_mode: TargetMode::Xor,
            calibrated_masks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSpec {
    pub name: String,
    pub toggles: AblationToggles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: AblationToggles,
    pub report: MetricReport,
    /// Hash of everything the training stage depends on; equal hashes mean
    /// the rows shared one checkpoint.
    pub checkpoint_fingerprint: String,
}

/// The stock four-row ladder: fixed-resize baseline, then no-resize, then
/// dataset-stats normalization, then flip TTA, each keeping the previous
/// switches.
pub fn default_ladder() -> Vec<RowSpec> {
    let base = AblationToggles::default();
    vec![
        RowSpec {
            name: "resize-256".into(),
            toggles: AblationToggles {
                resize: true,
                ..base
            },
        },
        RowSpec {
            name: "no-resize".into(),
            toggles: base,
        },
        RowSpec {
            name: "+stats-norm".into(),
            toggles: AblationToggles {
                normalization: NormMode::DatasetStats,
                ..base
            },
        },
        RowSpec {
            name: "+tta".into(),
            toggles: AblationToggles {
                normalization: NormMode::DatasetStats,
                tta: true,
                ..base
            },
        },
    ]
}

#[derive(Serialize)]
struct TrainKey<'a> {
    train: &'a TrainConfig,
    model: &'a ModelConfig,
    target_mode: TargetMode,
    calibrated_masks: bool,
    seed: u64,
}

fn fingerprint_of(key: &TrainKey) -> String {
    let json = serde_json::to_string(key).expect("train key serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hex::encode(&hasher.finalize()[..16])
}

fn inference_config(t: &AblationToggles) -> InferenceConfig {
    InferenceConfig {
        no_resize: !t.resize,
        resize_to: 256,
        normalization: t.normalization,
        tta: t.tta,
        tta_ops: vec![TtaOp::HFlip, TtaOp::VFlip],
        decision_threshold: 0.5,
    }
}

fn calibrated_samples(data_dir: &Path, samples: &[ImageSample]) -> Result<Vec<ImageSample>> {
    let boxes_path = data_dir.join("train").join("boxes.csv");
    if !boxes_path.exists() {
        return Err(Error::Config(format!(
            "calibrated_masks requires {}",
            boxes_path.display()
        )));
    }
    let anns = read_box_annotations(&boxes_path)?;
    samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if let (Some(mask), Some(ann)) = (s.mask.as_ref(), anns.get(&s.id)) {
                s.mask = Some(calibrate_with_boxes(mask, ann)?);
            }
            Ok(s)
        })
        .collect()
}

fn evaluate_row(
    state: &TrainState,
    stats: &ChannelStats,
    toggles: &AblationToggles,
    test_dir: &Path,
    truth: &BTreeMap<String, u8>,
    fingerprint: &str,
) -> Result<MetricReport> {
    let icfg = inference_config(toggles);
    let stats_opt = (icfg.normalization == NormMode::DatasetStats).then_some(stats);
    let (preds, summary, failures) =
        predict_batch(&test_dir.join("images"), state, &icfg, stats_opt)?;
    for (id, err) in &failures {
        eprintln!("warning: could not score `{id}`: {err}");
    }
    let mut acc_pairs = Vec::new();
    let mut auc_pairs = Vec::new();
    for p in &preds {
        if let Some(&t) = truth.get(&p.image_id) {
            acc_pairs.push((p.label, t));
            auc_pairs.push((p.score, t));
        }
    }
    Ok(MetricReport {
        accuracy: compute_accuracy(&acc_pairs)?,
        auc: compute_auc(&auc_pairs)?,
        n: acc_pairs.len(),
        mean_latency_ms: summary.mean_latency_ms,
        config_fingerprint: fingerprint.to_string(),
    })
}

fn write_table(out_dir: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut md = String::from(
        "| # | Configuration | Accuracy | AUC | n |\n|---|---|---|---|---|\n",
    );
    for (i, row) in rows.iter().enumerate() {
        md.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {} |\n",
            i + 1,
            row.name,
            row.report.accuracy,
            row.report.auc,
            row.report.n
        ));
    }
    let path = out_dir.join("ablation.md");
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, md)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs every ladder row over `data_dir` (`train/` + `test/` layout). Rows
/// that share a training fingerprint reuse the first row's checkpoint.
/// Writes `ablation.md` and one `row-<name>.json` per row under `out_dir`.
pub fn run_ablation(
    data_dir: &Path,
    ladder: &[RowSpec],
    base_train: &TrainConfig,
    model: &ModelConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if ladder.is_empty() {
        return Err(Error::Argument("empty ablation ladder".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let train_dir = data_dir.join("train");
    let test_dir = data_dir.join("test");
    let auto_samples = load_samples(&train_dir, Some(&train_dir.join("masks")), Provenance::Auto)?;
    let stats = ChannelStats::from_samples(&auto_samples)?;
    let truth: BTreeMap<String, u8> = read_labels(&test_dir)?
        .into_iter()
        .map(|r| (r.id, r.label))
        .collect();

    let mut checkpoints: BTreeMap<String, TrainState> = BTreeMap::new();
    let mut rows = Vec::with_capacity(ladder.len());
    for spec in ladder {
        let mut tc = base_train.clone();
        tc.seed = seed;
        tc.target_mode = spec.toggles.target_mode;
        let fp = fingerprint_of(&TrainKey {
            train: &tc,
            model,
            target_mode: spec.toggles.target_mode,
            calibrated_masks: spec.toggles.calibrated_masks,
            seed,
        });
        if !checkpoints.contains_key(&fp) {
            let samples = if spec.toggles.calibrated_masks {
                calibrated_samples(data_dir, &auto_samples)?
            } else {
                auto_samples.clone()
            };
            let state = fit(&samples, &tc, model, None)?;
            save_checkpoint(&state, &out_dir.join(format!("ckpt-{fp}.json")))?;
            checkpoints.insert(fp.clone(), state);
        }
        let state = &checkpoints[&fp];
        let report = evaluate_row(state, &stats, &spec.toggles, &test_dir, &truth, &fp)?;
        let row = AblationRow {
            name: spec.name.clone(),
            toggles: spec.toggles,
            report,
            checkpoint_fingerprint: fp,
        };
        let row_path = out_dir.join(format!("row-{}.json", spec.name.replace(['/', ' '], "_")));
        let tmp = row_path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&row)?)?;
        std::fs::rename(&tmp, row_path)?;
        rows.push(row);
    }
    write_table(out_dir, &rows)?;
    Ok(rows)
}
