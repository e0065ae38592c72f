//! Full-image prediction: no-resize input (padded, never resampled),
//! configurable normalization, and flip-based test-time augmentation.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::model::{self, Mode};
use crate::raster::{resize_bilinear, RgbRaster};
use crate::training::TrainState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// x / 255
    Unit,
    /// (x/255 - mean_c) / std_c with per-channel stats from the training set.
    DatasetStats,
    /// (x - mu_img) / (sigma_img + 1e-8), per channel, per image.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaOp {
    HFlip,
    VFlip,
    HVFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub no_resize: bool,
    /// Square side used only when `no_resize` is false.
    pub resize_to: usize,
    pub normalization: NormMode,
    pub tta: bool,
    pub tta_ops: Vec<TtaOp>,
    pub decision_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            no_resize: true,
            resize_to: 256,
            normalization: NormMode::Unit,
            tta: true,
            tta_ops: vec![TtaOp::HFlip, TtaOp::VFlip],
            decision_threshold: 0.5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tta && self.tta_ops.is_empty() {
            return Err(Error::Config("tta enabled but tta_ops is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return Err(Error::Config("decision_threshold must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Per-channel normalization statistics on the [0,1] scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Computes stats over every pixel of the given samples.
    pub fn from_samples(samples: &[ImageSample]) -> Result<ChannelStats> {
        if samples.is_empty() {
            return Err(Error::Argument("no samples for channel stats".into()));
        }
        let mut sum = [0.0f64; 3];
        let mut sumsq = [0.0f64; 3];
        let mut n = 0u64;
        for s in samples {
            let (h, w) = (s.image.height(), s.image.width());
            n += (h * w) as u64;
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let v = f64::from(s.image.pixels[(y, x, c)]) / 255.0;
                        sum[c] += v;
                        sumsq[c] += v * v;
                    }
                }
            }
        }
        let nf = n as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = sum[c] / nf;
            std[c] = (sumsq[c] / nf - mean[c] * mean[c]).max(0.0).sqrt().max(1e-8);
        }
        Ok(ChannelStats { mean, std })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["mean_r", "mean_g", "mean_b", "std_r", "std_g", "std_b"])?;
        wtr.write_record([
            self.mean[0].to_string(),
            self.mean[1].to_string(),
            self.mean[2].to_string(),
            self.std[0].to_string(),
            self.std[1].to_string(),
            self.std[2].to_string(),
        ])?;
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<ChannelStats> {
        let mut rdr = csv::Reader::from_path(path)?;
        let row = rdr
            .records()
            .next()
            .ok_or_else(|| Error::Config(format!("empty stats file {}", path.display())))??;
        if row.len() != 6 {
            return Err(Error::Config("stats file must have 6 columns".into()));
        }
        let vals: Vec<f64> = row
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad stats value `{s}`: {e}")))
            })
            .collect::<Result<_>>()?;
        let stats = ChannelStats {
            mean: [vals[0], vals[1], vals[2]],
            std: [vals[3], vals[4], vals[5]],
        };
        if stats.std.iter().any(|&s| s == 0.0) {
            return Err(Error::Config("zero std in stats file".into()));
        }
        Ok(stats)
    }
}

/// Normalizes an RGB raster to a `(3, H, W)` float tensor per the mode.
pub fn normalize(
    image: &RgbRaster,
    mode: NormMode,
    stats: Option<&ChannelStats>,
) -> Result<Array3<f64>> {
    let mut t = image.to_unit_tensor();
    match mode {
        NormMode::Unit => {}
        NormMode::DatasetStats => {
            let stats = stats.ok_or_else(|| {
                Error::Config("dataset_stats normalization requires a stats file".into())
            })?;
            if stats.std.iter().any(|&s| s == 0.0) {
                return Err(Error::Config("zero std in stats".into()));
            }
            for c in 0..3 {
                t.index_axis_mut(ndarray::Axis(0), c)
                    .mapv_inplace(|v| (v - stats.mean[c]) / stats.std[c]);
            }
        }
        NormMode::PerImage => {
            for c in 0..3 {
                let ch = t.index_axis(ndarray::Axis(0), c);
                let n = ch.len() as f64;
                let mu = ch.sum() / n;
                let var = ch.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let sigma = var.sqrt();
                t.index_axis_mut(ndarray::Axis(0), c)
                    .mapv_inplace(|v| (v - mu) / (sigma + 1e-8));
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub score: f64,
    pub label: u8,
    pub per_view_scores: Vec<f64>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSummary {
    pub count: usize,
    pub mean_latency_ms: f64,
}

fn view_rasters(image: &RgbRaster, config: &InferenceConfig) -> Vec<RgbRaster> {
    let mut views = vec![image.clone()];
    if config.tta {
        for op in &config.tta_ops {
            views.push(match op {
                TtaOp::HFlip => image.flip_horizontal(),
                TtaOp::VFlip => image.flip_vertical(),
                TtaOp::HVFlip => image.flip_horizontal().flip_vertical(),
            });
        }
    }
    views
}

fn score_view(
    view: &RgbRaster,
    state: &TrainState,
    config: &InferenceConfig,
    stats: Option<&ChannelStats>,
) -> Result<f64> {
    let t = normalize(view, config.normalization, stats)?;
    let padded = model::pad_to_stride(&t, state.model_config.stride);
    let trace = model::forward(&padded, &state.params, &state.model_config, Mode::Eval, None)?;
    Ok(trace.prob)
}

/// Scores one image: mean over the identity view and each enabled flip.
/// Latency covers the forward passes, not file decode.
pub fn predict(
    image: &RgbRaster,
    image_id: &str,
    state: &TrainState,
    config: &InferenceConfig,
    stats: Option<&ChannelStats>,
) -> Result<Prediction> {
    config.validate()?;
    let started = Instant::now();
    let base = if config.no_resize {
        image.clone()
    } else {
        resize_bilinear(image, config.resize_to, config.resize_to)
    };
    let mut per_view_scores = Vec::new();
    for view in view_rasters(&base, config) {
        per_view_scores.push(score_view(&view, state, config, stats)?);
    }
    let score = per_view_scores.iter().sum::<f64>() / per_view_scores.len() as f64;
    Ok(Prediction {
        image_id: image_id.to_string(),
        label: u8::from(score >= config.decision_threshold),
        score,
        per_view_scores,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Identity-view localization map upsampled (nearest neighbor) to the
/// original image size. Qualitative output only; detection is scored on the
/// image-level probability.
pub fn localization_map(
    image: &RgbRaster,
    state: &TrainState,
    config: &InferenceConfig,
    stats: Option<&ChannelStats>,
) -> Result<Array2<f64>> {
    let t = normalize(image, config.normalization, stats)?;
    let padded = model::pad_to_stride(&t, state.model_config.stride);
    let trace = model::forward(&padded, &state.params, &state.model_config, Mode::Eval, None)?;
    let stride = state.model_config.stride;
    let (h, w) = (image.height(), image.width());
    let mut up = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            up[(y, x)] = trace.loc[(y / stride, x / stride)];
        }
    }
    Ok(up)
}

/// Scores every decodable PNG in a directory at native size. Undecodable
/// files are recorded and the run continues.
pub fn predict_batch(
    dir: &Path,
    state: &TrainState,
    config: &InferenceConfig,
    stats: Option<&ChannelStats>,
) -> Result<(Vec<Prediction>, BatchSummary, Vec<(String, String)>)> {
    config.validate()?;
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    files.sort();
    let mut preds = Vec::new();
    let mut failures = Vec::new();
    for path in files {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match RgbRaster::load_png(&path) {
            Ok(image) => preds.push(predict(&image, &id, state, config, stats)?),
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    let mean_latency_ms = if preds.is_empty() {
        0.0
    } else {
        preds.iter().map(|p| p.elapsed_ms).sum::<f64>() / preds.len() as f64
    };
    let summary = BatchSummary {
        count: preds.len(),
        mean_latency_ms,
    };
    Ok((preds, summary, failures))
}

/// Writes `image_id,score,label,elapsed_ms` rows.
pub fn write_predictions_csv(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["image_id", "score", "label", "elapsed_ms"])?;
    for p in preds {
        wtr.write_record([
            p.image_id.as_str(),
            &p.score.to_string(),
            &p.label.to_string(),
            &format!("{:.3}", p.elapsed_ms),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads rows written by [`write_predictions_csv`]; per-view scores are not
/// serialized and come back empty.
pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        if row.len() != 4 {
            return Err(Error::Data(format!(
                "predictions row has {} fields, expected 4",
                row.len()
            )));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("bad prediction value `{s}`: {e}")))
        };
        out.push(Prediction {
            image_id: row[0].to_string(),
            score: parse(&row[1])?,
            label: row[2]
                .trim()
                .parse()
                .map_err(|e| Error::Data(format!("bad label `{}`: {e}", &row[2])))?,
            per_view_scores: vec![],
            elapsed_ms: parse(&row[3])?,
        });
    }
    Ok(out)
}
