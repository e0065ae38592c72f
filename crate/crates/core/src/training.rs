//! Weakly-supervised training loop.
//!
//! Each step combines two signals: image-level classifier BCE, and the
//! inter-patch consistency loss against the grid-projected pseudo-mask.
//! Total batch loss is `mean(L_cls) + lambda_ipc * mean(L_ipc)`. Authentic
//! samples participate in the consistency branch with all-zero targets, so
//! no ground truth is needed for that class.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{
    embed_matrix, ipc_grad_scores, ipc_loss_matrix, target_matrix, volume_matrix, TargetMode,
    MAX_GRID_CELLS,
};
use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::maskops::{mask_to_grid, random_crop_with_label_reset, GridRule};
use crate::model::{self, Mode, ModelConfig, ParameterSet};
use crate::nn::{bce, Adam};
use crate::rng::{derive_rng, mix_seed};

// RNG stream tags.
const STREAM_INIT: u64 = 10;
const STREAM_SHUFFLE: u64 = 11;
const STREAM_CROP: u64 = 12;
const STREAM_DROPOUT: u64 = 13;
const STREAM_MASTER: u64 = 14;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_ipc: f64,
    pub target_mode: TargetMode,
    /// In-batch crop (h, w); `None` feeds whole images (padded).
    pub crop_size: Option<(usize, usize)>,
    /// Tampered fraction at which a crop keeps label 1.
    pub overlap_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 100,
            lambda_ipc: 1.0,
            target_mode: TargetMode::Xor,
            crop_size: Some((256, 256)),
            overlap_threshold: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lambda_ipc < 0.0 {
            return Err(Error::Config("lambda_ipc must be >= 0".into()));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_ipc: f64,
    pub loss_total: f64,
}

/// Full training state; checkpoint round-trips reproduce identical
/// subsequent losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ParameterSet,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub loss_history: Vec<EpochLoss>,
}

impl TrainState {
    pub fn new(train_config: TrainConfig, model_config: ModelConfig) -> Result<TrainState> {
        train_config.validate()?;
        model_config.validate()?;
        let params = ParameterSet::init(&model_config, mix_seed(train_config.seed, &[STREAM_INIT]))?;
        let n = params.n_params();
        let optimizer = Adam::new(train_config.learning_rate, n);
        let rng = derive_rng(train_config.seed, &[STREAM_MASTER]);
        Ok(TrainState {
            model_config,
            train_config,
            params,
            optimizer,
            epoch: 0,
            rng,
            loss_history: Vec::new(),
        })
    }
}

/// Versioned self-describing checkpoint archive.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    state: TrainState,
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        state: state.clone(),
    };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec(&ck)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::State(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::State(format!("corrupt checkpoint {}: {e}", path.display())))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::State(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            ck.version
        )));
    }
    Ok(ck.state)
}

/// Per-sample loss terms plus parameter gradients, already scaled by the
/// batch-mean weights (`1/batch_len` on the classifier term,
/// `lambda_ipc/batch_len` on the consistency term). With `batch_len` 1 the
/// result is the full gradient of `L_cls + lambda * L_ipc` for one sample,
/// which is what the finite-difference checks consume.
pub fn sample_grads(
    sample: &ImageSample,
    state: &TrainState,
    batch_len: usize,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, ParameterSet)> {
    let cfg = &state.model_config;
    let tc = &state.train_config;
    let mask = sample.mask.as_ref().ok_or_else(|| {
        Error::Data(format!("sample `{}` has no pseudo-mask", sample.id))
    })?;

    // pad image (edge replicate) and mask (zeros: padded cells are authentic)
    let tensor = sample.image.to_unit_tensor();
    let padded = model::pad_to_stride(&tensor, cfg.stride);
    let (nh, nw) = (padded.shape()[1], padded.shape()[2]);
    let mut mask_padded = Array2::zeros((nh, nw));
    mask_padded
        .slice_mut(ndarray::s![..mask.height(), ..mask.width()])
        .assign(&mask.values);
    let (gh, gw) = (nh / cfg.stride, nw / cfg.stride);
    if gh * gw > MAX_GRID_CELLS {
        return Err(Error::Config(format!(
            "grid {gh}x{gw} exceeds the {MAX_GRID_CELLS}-cell cap"
        )));
    }
    let grid = mask_to_grid(&mask_padded, gh, gw, GridRule::Max)?;

    let trace = model::forward(&padded, &state.params, cfg, Mode::Train, Some(dropout_rng))?;
    let label = f64::from(sample.label);
    let l_cls = bce(label, trace.prob);

    let featmat = trace.feature_grid(cfg.stride).as_matrix();
    let (e1, e2) = embed_matrix(&featmat, &state.params.heads);
    let v = volume_matrix(&e1, &e2, cfg.embed_dim);
    let t = target_matrix(&grid, tc.target_mode);
    let l_ipc = ipc_loss_matrix(&v, &t);

    // gradients, scaled for batch means
    let inv_b = 1.0 / batch_len as f64;
    let dlogit = (trace.prob - label) * inv_b;

    let mut dfeat3: Option<Array3<f64>> = None;
    let mut grads_phi: Option<(Array2<f64>, Array2<f64>)> = None;
    if tc.lambda_ipc > 0.0 {
        let mut dscore = ipc_grad_scores(&v, &t, cfg.embed_dim);
        dscore.mapv_inplace(|g| g * tc.lambda_ipc * inv_b);
        let de1 = dscore.dot(&e2);
        let de2 = dscore.t().dot(&e1);
        let dfeat_mat =
            de1.dot(&state.params.heads.phi1.weight) + de2.dot(&state.params.heads.phi2.weight);
        let mut df = Array3::zeros((cfg.channels, gh, gw));
        for y in 0..gh {
            for x in 0..gw {
                for c in 0..cfg.channels {
                    df[(c, y, x)] = dfeat_mat[(y * gw + x, c)];
                }
            }
        }
        dfeat3 = Some(df);
        grads_phi = Some((de1, de2));
    }

    let mut grads = model::backward(&trace, &state.params, dlogit, dfeat3.as_ref());
    if let Some((de1, de2)) = grads_phi {
        grads.heads.phi1.weight = de1.t().dot(&featmat);
        grads.heads.phi1.bias = de1.sum_axis(ndarray::Axis(0));
        grads.heads.phi2.weight = de2.t().dot(&featmat);
        grads.heads.phi2.bias = de2.sum_axis(ndarray::Axis(0));
    }
    Ok((l_cls, l_ipc, grads))
}

/// One optimizer update over a batch. Returns (mean L_cls, mean L_ipc).
///
/// `step_tag` feeds the per-sample dropout streams; callers must pass
/// distinct tags per step for distinct randomness.
pub fn train_step(
    batch: &[ImageSample],
    state: &mut TrainState,
    step_tag: (u64, u64),
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut sum_cls = 0.0;
    let mut sum_ipc = 0.0;
    let mut total = state.params.zeros_like();
    for (slot, sample) in batch.iter().enumerate() {
        let mut drng = derive_rng(
            state.train_config.seed,
            &[STREAM_DROPOUT, step_tag.0, step_tag.1, slot as u64],
        );
        let (l_cls, l_ipc, grads) = sample_grads(sample, state, batch.len(), &mut drng)?;
        sum_cls += l_cls;
        sum_ipc += l_ipc;
        total.axpy(1.0, &grads);
    }
    let mut flat = state.params.flatten();
    let gflat = total.flatten();
    state.optimizer.step(&mut flat, &gflat);
    state.params.assign_flat(&flat);
    Ok((sum_cls / batch.len() as f64, sum_ipc / batch.len() as f64))
}

fn shuffle(idx: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
}

/// Class-stratified epoch order: positives and negatives are shuffled
/// separately and merged proportionally, so every batch mirrors the
/// dataset's class mix. Without this, per-batch class imbalance injects a
/// common-mode gradient that swamps the small differential signal at
/// desk-scale step counts.
fn shuffled_indices(labels: &[u8], seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = derive_rng(seed, &[STREAM_SHUFFLE, epoch as u64]);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    shuffle(&mut pos, &mut rng);
    shuffle(&mut neg, &mut rng);
    let (np, nn) = (pos.len(), neg.len());
    let mut out = Vec::with_capacity(np + nn);
    let (mut tp, mut tn) = (0usize, 0usize);
    while tp < np || tn < nn {
        // take from whichever class is furthest behind its quota
        let want_pos = tn == nn
            || (tp < np && (tp + 1) * nn <= (tn + 1) * np);
        if want_pos {
            out.push(pos[tp]);
            tp += 1;
        } else {
            out.push(neg[tn]);
            tn += 1;
        }
    }
    out
}

/// Runs the remaining epochs recorded in `state.train_config`. Writes a
/// checkpoint and a training-log row per epoch when `out_dir` is given.
pub fn resume(
    state: &mut TrainState,
    dataset: &[ImageSample],
    out_dir: Option<&Path>,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    let tc = state.train_config.clone();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    for epoch in state.epoch..tc.epochs {
        let started = Instant::now();
        let labels: Vec<u8> = dataset.iter().map(|s| s.label).collect();
        let order = shuffled_indices(&labels, tc.seed, epoch);
        let mut sum_cls = 0.0;
        let mut sum_ipc = 0.0;
        let mut seen = 0usize;
        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<ImageSample> = chunk
                .iter()
                .map(|&i| {
                    let s = &dataset[i];
                    match tc.crop_size {
                        Some(size) => random_crop_with_label_reset(
                            s,
                            size,
                            tc.overlap_threshold,
                            mix_seed(tc.seed, &[STREAM_CROP, epoch as u64, i as u64]),
                        ),
                        None => Ok(s.clone()),
                    }
                })
                .collect::<Result<_>>()?;
            let (l_cls, l_ipc) = train_step(&batch, state, (epoch as u64, step as u64))?;
            sum_cls += l_cls * batch.len() as f64;
            sum_ipc += l_ipc * batch.len() as f64;
            seen += batch.len();
        }
        let loss_cls = sum_cls / seen as f64;
        let loss_ipc = sum_ipc / seen as f64;
        let entry = EpochLoss {
            epoch,
            loss_cls,
            loss_ipc,
            loss_total: loss_cls + tc.lambda_ipc * loss_ipc,
        };
        state.loss_history.push(entry);
        state.epoch = epoch + 1;
        if let Some(dir) = out_dir {
            save_checkpoint(state, &dir.join("last.json"))?;
            append_train_log(dir, &entry, started.elapsed().as_secs_f64())?;
        }
    }
    Ok(())
}

/// Trains from scratch. Also writes per-channel normalization stats of the
/// training set when `out_dir` is given.
pub fn fit(
    dataset: &[ImageSample],
    train_config: &TrainConfig,
    model_config: &ModelConfig,
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    let mut state = TrainState::new(train_config.clone(), *model_config)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let stats = crate::inference::ChannelStats::from_samples(dataset)?;
        stats.write_csv(&dir.join("stats.csv"))?;
    }
    resume(&mut state, dataset, out_dir)?;
    Ok(state)
}

fn append_train_log(dir: &Path, entry: &EpochLoss, seconds: f64) -> Result<()> {
    use std::io::Write;
    let path = dir.join("train_log.csv");
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if new {
        writeln!(f, "epoch,loss_cls,loss_ipc,loss_total,seconds")?;
    }
    writeln!(
        f,
        "{},{},{},{},{:.3}",
        entry.epoch, entry.loss_cls, entry.loss_ipc, entry.loss_total, seconds
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatagenConfig};
    use crate::maskops::{Provenance, PseudoMask};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            channels: 4,
            stride: 16,
            encoder_depth: 4,
            dropout_rate: 0.1,
            embed_dim: 4,
        }
    }

    fn tiny_dataset(n_real: usize, n_fake: usize, seed: u64) -> Vec<ImageSample> {
        let cfg = DatagenConfig {
            n_real,
            n_fake,
            min_size: 48,
            max_size: 64,
            ..DatagenConfig::default()
        };
        generate_dataset(&cfg, seed)
            .unwrap()
            .into_iter()
            .map(|r| ImageSample {
                mask: Some(PseudoMask::from_gray(
                    &r.gt_mask,
                    Provenance::SyntheticGt,
                    &r.id,
                )),
                id: r.id,
                image: r.image,
                label: r.label,
            })
            .collect()
    }

    fn tiny_train(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs,
            crop_size: Some((48, 48)),
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn step_count_arithmetic() {
        let data = tiny_dataset(4, 4, 3);
        let tc = TrainConfig {
            batch_size: 4,
            epochs: 1,
            crop_size: None,
            seed: 1,
            ..TrainConfig::default()
        };
        let state = fit(&data, &tc, &tiny_model(), None).unwrap();
        assert_eq!(state.loss_history.len(), 1);
        assert_eq!(state.epoch, 1);
    }

    #[test]
    fn missing_mask_names_the_sample() {
        let mut data = tiny_dataset(2, 2, 4);
        data[1].mask = None;
        let id = data[1].id.clone();
        let err = fit(&data, &tiny_train(1, 0), &tiny_model(), None).unwrap_err();
        assert!(err.to_string().contains(&id), "{err}");
    }

    #[test]
    fn empty_dataset_rejected() {
        let err = fit(&[], &tiny_train(1, 0), &tiny_model(), None);
        assert!(err.is_err());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = tiny_dataset(3, 3, 5);
        let a = fit(&data, &tiny_train(2, 9), &tiny_model(), None).unwrap();
        let b = fit(&data, &tiny_train(2, 9), &tiny_model(), None).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn checkpoint_resume_equals_straight_run() {
        let data = tiny_dataset(3, 3, 6);
        let straight = fit(&data, &tiny_train(4, 2), &tiny_model(), None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let _short = fit(&data, &tiny_train(2, 2), &tiny_model(), Some(dir.path())).unwrap();
        let mut resumed = load_checkpoint(&dir.path().join("last.json")).unwrap();
        resumed.train_config.epochs = 4;
        resume(&mut resumed, &data, None).unwrap();

        assert_eq!(straight.loss_history.len(), resumed.loss_history.len());
        for (a, b) in straight.loss_history.iter().zip(&resumed.loss_history) {
            assert_eq!(a.loss_cls.to_bits(), b.loss_cls.to_bits(), "epoch {}", a.epoch);
            assert_eq!(a.loss_ipc.to_bits(), b.loss_ipc.to_bits());
        }
        assert_eq!(straight.params, resumed.params);
    }

    #[test]
    fn loss_decomposition_holds() {
        let data = tiny_dataset(2, 2, 7);
        let tc = TrainConfig {
            lambda_ipc: 0.7,
            ..tiny_train(1, 3)
        };
        let state = fit(&data, &tc, &tiny_model(), None).unwrap();
        let e = &state.loss_history[0];
        assert!((e.loss_total - (e.loss_cls + 0.7 * e.loss_ipc)).abs() < 1e-6);
    }

    #[test]
    fn lambda_zero_matches_classifier_only_updates() {
        // with lambda 0 the IPC term must not touch any parameter updates
        let data = tiny_dataset(2, 2, 8);
        let tc = TrainConfig {
            lambda_ipc: 0.0,
            ..tiny_train(1, 4)
        };
        let a = fit(&data, &tc, &tiny_model(), None).unwrap();
        let b = fit(&data, &tc, &tiny_model(), None).unwrap();
        assert_eq!(a.params, b.params);
        // phi heads receive no gradient: they stay at their init values
        let init = TrainState::new(tc, tiny_model()).unwrap();
        assert_eq!(a.params.heads, init.params.heads);
    }

    #[test]
    fn checkpoint_file_is_versioned() {
        let tc = tiny_train(1, 0);
        let state = TrainState::new(tc, tiny_model()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&state, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"version\":1"));
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, state.params);
    }
}
