//! End-to-end orchestration: optional data generation, mask resolution,
//! training, batch prediction, and metrics, all under one run directory.
//!
//! Layout: `run/{config.snapshot.toml, data/, ckpt/, predictions.csv,
//! report.json, timing.json}`. `report.json` holds only deterministic
//! fields so a rerun with the same seed is byte-identical; wall-clock
//! numbers go to `timing.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{generate_dataset, write_dataset, DatagenConfig};
use crate::dataset::{load_samples, read_labels};
use crate::error::{Error, Result};
use crate::inference::{predict_batch, write_predictions_csv, ChannelStats, InferenceConfig, NormMode};
use crate::maskops::Provenance;
use crate::metrics::{compute_accuracy, compute_auc, MetricReport};
use crate::model::ModelConfig;
use crate::rng::mix_seed;
use crate::training::{fit, TrainConfig};

const STREAM_TRAIN_DATA: u64 = 40;
const STREAM_TEST_DATA: u64 = 41;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineDatagen {
    pub train: DatagenConfig,
    pub test: DatagenConfig,
}

/// Full run configuration: either `datagen` or `data_dir` must be present.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub datagen: Option<PipelineDatagen>,
    /// Existing dataset root with `train/` and `test/` subdirectories.
    pub data_dir: Option<PathBuf>,
    /// Pseudo-mask directory for the training split; defaults to the
    /// split's own `masks/` when absent.
    pub masks_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            datagen: None,
            data_dir: None,
            masks_dir: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        Ok(cfg)
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("RunConfig serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex::encode(&hasher.finalize()[..16])
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// The byte-stable part of the report (what `report.json` holds).
#[derive(Debug, Serialize, Deserialize)]
struct DeterministicReport {
    accuracy: f64,
    auc: f64,
    n: usize,
    config_fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TimingReport {
    mean_latency_ms: f64,
    count: usize,
}

/// Runs the two-stage workflow end to end and writes all artifacts under
/// `out_dir`. Any stage failure aborts with the stage name attached.
pub fn pipeline(config: &RunConfig, out_dir: &Path) -> Result<MetricReport> {
    std::fs::create_dir_all(out_dir)?;
    // config snapshot first, so failed runs are reproducible too
    let snapshot = toml::to_string_pretty(config)
        .map_err(|e| Error::Serde(e.to_string()).in_stage("config"))?;
    write_atomic(&out_dir.join("config.snapshot.toml"), snapshot.as_bytes())
        .map_err(|e| e.in_stage("config"))?;
    config.train.validate().map_err(|e| e.in_stage("config"))?;
    config.model.validate().map_err(|e| e.in_stage("config"))?;
    config.inference.validate().map_err(|e| e.in_stage("config"))?;

    // data
    let (train_dir, test_dir) = if let Some(dg) = &config.datagen {
        let data = out_dir.join("data");
        let train_dir = data.join("train");
        let test_dir = data.join("test");
        let run = || -> Result<()> {
            let train_recs = generate_dataset(&dg.train, mix_seed(config.seed, &[STREAM_TRAIN_DATA]))?;
            write_dataset(&train_dir, &train_recs)?;
            let test_recs = generate_dataset(&dg.test, mix_seed(config.seed, &[STREAM_TEST_DATA]))?;
            write_dataset(&test_dir, &test_recs)?;
            Ok(())
        };
        run().map_err(|e| e.in_stage("datagen"))?;
        (train_dir, test_dir)
    } else {
        let root = config.data_dir.clone().ok_or_else(|| {
            Error::Data("neither datagen nor data_dir configured".into()).in_stage("data")
        })?;
        (root.join("train"), root.join("test"))
    };

    // masks
    let masks_dir = config
        .masks_dir
        .clone()
        .unwrap_or_else(|| train_dir.join("masks"));
    if !masks_dir.is_dir() {
        return Err(
            Error::Data(format!("mask directory {} not found", masks_dir.display()))
                .in_stage("masks"),
        );
    }
    let provenance = if config.masks_dir.is_some() {
        Provenance::Auto
    } else {
        Provenance::SyntheticGt
    };
    let train_samples = load_samples(&train_dir, Some(&masks_dir), provenance)
        .map_err(|e| e.in_stage("masks"))?;

    // train
    let ckpt_dir = out_dir.join("ckpt");
    let state = fit(&train_samples, &config.train, &config.model, Some(&ckpt_dir))
        .map_err(|e| e.in_stage("train"))?;

    // predict
    let stats = if config.inference.normalization == NormMode::DatasetStats {
        Some(
            ChannelStats::read_csv(&ckpt_dir.join("stats.csv"))
                .map_err(|e| e.in_stage("predict"))?,
        )
    } else {
        None
    };
    let (preds, summary, failures) =
        predict_batch(&test_dir.join("images"), &state, &config.inference, stats.as_ref())
            .map_err(|e| e.in_stage("predict"))?;
    for (id, err) in &failures {
        eprintln!("warning: could not score `{id}`: {err}");
    }
    write_predictions_csv(&out_dir.join("predictions.csv"), &preds)
        .map_err(|e| e.in_stage("predict"))?;

    // metrics
    let truth: BTreeMap<String, u8> = read_labels(&test_dir)
        .map_err(|e| e.in_stage("metrics"))?
        .into_iter()
        .map(|r| (r.id, r.label))
        .collect();
    let mut acc_pairs = Vec::new();
    let mut auc_pairs = Vec::new();
    for p in &preds {
        if let Some(&t) = truth.get(&p.image_id) {
            acc_pairs.push((p.label, t));
            auc_pairs.push((p.score, t));
        }
    }
    let accuracy = compute_accuracy(&acc_pairs).map_err(|e| e.in_stage("metrics"))?;
    let auc = compute_auc(&auc_pairs).map_err(|e| e.in_stage("metrics"))?;
    let report = MetricReport {
        accuracy,
        auc,
        n: acc_pairs.len(),
        mean_latency_ms: summary.mean_latency_ms,
        config_fingerprint: config.fingerprint(),
    };

    let det = DeterministicReport {
        accuracy: report.accuracy,
        auc: report.auc,
        n: report.n,
        config_fingerprint: report.config_fingerprint.clone(),
    };
    write_atomic(
        &out_dir.join("report.json"),
        serde_json::to_string_pretty(&det)?.as_bytes(),
    )
    .map_err(|e| e.in_stage("metrics"))?;
    write_atomic(
        &out_dir.join("timing.json"),
        serde_json::to_string_pretty(&TimingReport {
            mean_latency_ms: summary.mean_latency_ms,
            count: summary.count,
        })?
        .as_bytes(),
    )
    .map_err(|e| e.in_stage("metrics"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::TamperType;

    fn smoke_config(seed: u64) -> RunConfig {
        let dg = DatagenConfig {
            min_size: 48,
            max_size: 64,
            types: vec![TamperType::Splice, TamperType::Removal],
            ..DatagenConfig::default()
        };
        RunConfig {
            seed,
            datagen: Some(PipelineDatagen {
                train: DatagenConfig {
                    n_real: 6,
                    n_fake: 6,
                    ..dg.clone()
                },
                test: DatagenConfig {
                    n_real: 4,
                    n_fake: 4,
                    ..dg
                },
            }),
            model: ModelConfig {
                channels: 4,
                stride: 16,
                encoder_depth: 4,
                dropout_rate: 0.1,
                embed_dim: 4,
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 4,
                crop_size: Some((48, 48)),
                seed,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn smoke_run_emits_report() {
        let dir = tempfile::tempdir().unwrap();
        let report = pipeline(&smoke_config(3), dir.path()).unwrap();
        assert_eq!(report.n, 8);
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("predictions.csv").exists());
        assert!(dir.path().join("config.snapshot.toml").exists());
        assert!(dir.path().join("timing.json").exists());
    }

    #[test]
    fn rerun_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        pipeline(&smoke_config(5), a.path()).unwrap();
        pipeline(&smoke_config(5), b.path()).unwrap();
        let ra = std::fs::read(a.path().join("report.json")).unwrap();
        let rb = std::fs::read(b.path().join("report.json")).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn missing_data_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            datagen: None,
            data_dir: None,
            ..smoke_config(1)
        };
        let err = pipeline(&cfg, dir.path()).unwrap_err();
        assert!(err.to_string().contains("data"), "{err}");
    }

    #[test]
    fn missing_masks_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let data = tempfile::tempdir().unwrap();
        // create train/test layout without masks
        let cfg0 = smoke_config(2);
        pipeline(&cfg0, dir.path()).unwrap();
        std::fs::rename(dir.path().join("data"), data.path().join("d")).unwrap();
        std::fs::remove_dir_all(data.path().join("d/train/masks")).unwrap();
        let cfg = RunConfig {
            datagen: None,
            data_dir: Some(data.path().join("d")),
            ..smoke_config(2)
        };
        let err = pipeline(&cfg, tempfile::tempdir().unwrap().path()).unwrap_err();
        assert!(err.to_string().contains("masks"), "{err}");
    }
}
