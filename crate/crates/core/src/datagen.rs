//! Synthetic tamper dataset generator.
//!
//! Produces procedural scenes (gradient background, soft color blobs, a few
//! solid shapes, per-image sensor-like noise) and tampers a configurable
//! subset with splice, copy-move, or removal edits, keeping exact ground
//! truth masks. Every edit ends with a light in-mask feathering blur, the
//! blending step a forger applies to hide seams; it leaves tampered pixels
//! with the noise-deficient signature blended forgeries carry in the wild.
//! The tamper distribution of the original task is private; this mix is a
//! documented stand-in that preserves the property the learning mechanism
//! needs: tampered pixels carry local statistics that disagree with their
//! surroundings.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, Rect};
use crate::raster::{GrayRaster, RgbRaster};
use crate::rng::derive_rng;

// Stream tags for per-record RNG derivation.
const STREAM_CLASS_SHUFFLE: u64 = 0;
const STREAM_RECORD: u64 = 1;
const STREAM_DONOR: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperType {
    Splice,
    CopyMove,
    Removal,
    None,
}

impl TamperType {
    pub fn as_str(&self) -> &'static str {
        match self {
            TamperType::Splice => "splice",
            TamperType::CopyMove => "copy_move",
            TamperType::Removal => "removal",
            TamperType::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<TamperType> {
        match s {
            "splice" => Ok(TamperType::Splice),
            "copy_move" => Ok(TamperType::CopyMove),
            "removal" => Ok(TamperType::Removal),
            "none" => Ok(TamperType::None),
            other => Err(Error::Argument(format!("unknown tamper type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillStrategy {
    Mean,
    Blur,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Large,
    Small,
}

/// One shape placed on a synthetic background.
#[derive(Debug, Clone)]
pub struct PlacedObject {
    pub kind: ObjectKind,
    pub bbox: Rect,
    pub texture_seed: u64,
}

/// A rendered procedural scene plus the objects it contains.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub raster: RgbRaster,
    pub objects: Vec<PlacedObject>,
}

/// One dataset record: image, exact tamper mask, and image-level label.
#[derive(Debug, Clone)]
pub struct TamperRecord {
    pub id: String,
    pub image: RgbRaster,
    pub gt_mask: GrayRaster,
    pub tamper_type: TamperType,
    pub label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub n_real: usize,
    pub n_fake: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub types: Vec<TamperType>,
    /// Fraction of tampered records whose edit is at most `small_max` px.
    pub small_fraction: f64,
    pub small_max: usize,
    /// Minimum large-object area as a multiple of the minimum small-object area.
    pub large_area_ratio: f64,
    /// Scene dynamic range, 0.0 (conservative mid-range palette that never
    /// clips at the 0/255 rails) to 2.0 (wide palette with rail-clipped,
    /// noise-free regions that resemble smoothing).
    pub scene_contrast: f64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            n_real: 8,
            n_fake: 8,
            min_size: 256,
            max_size: 512,
            types: vec![TamperType::Splice, TamperType::CopyMove, TamperType::Removal],
            small_fraction: 0.1,
            small_max: 12,
            large_area_ratio: 4.0,
            scene_contrast: 1.0,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_size > self.max_size {
            return Err(Error::Config(format!(
                "invalid size range: min {} > max {}",
                self.min_size, self.max_size
            )));
        }
        if self.min_size < 32 {
            return Err(Error::Config("min_size must be at least 32 px".into()));
        }
        if !(0.0..=2.0).contains(&self.scene_contrast) {
            return Err(Error::Config(format!(
                "scene_contrast {} outside [0, 2]",
                self.scene_contrast
            )));
        }
        if self.n_fake > 0 && self.types.iter().all(|t| *t == TamperType::None) {
            return Err(Error::Config(
                "n_fake > 0 requires at least one tamper type".into(),
            ));
        }
        Ok(())
    }
}

const SMALL_OBJECT_MIN_SIDE: usize = 6;
const SMALL_OBJECT_MAX_SIDE: usize = 12;

fn normal_sample(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    Normal::new(mean, std).unwrap().sample(rng)
}

/// Renders a procedural scene: smooth gradient + soft blobs + shapes + noise.
pub fn generate_scene(rng: &mut ChaCha8Rng, height: usize, width: usize, contrast: f64) -> SyntheticScene {
    let mut canvas: Array3<f64> = Array3::zeros((height, width, 3));

    // Smooth per-channel color ramp. At low contrast the dynamic range stays
    // away from the 0/255 rails: clipped pixels lose their sensor noise, and
    // a noise-free patch resembles a smoothed (tampered) one. High-contrast
    // scenes deliberately include such rail-clipped regions.
    let k = contrast;
    let br = 0.1 + 0.2 * k;
    let gr = 0.15 + 0.35 * k;
    let ar = 0.08 + 0.10 * k;
    let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.5 - br..0.5 + br)).collect();
    let gx: Vec<f64> = (0..3).map(|_| rng.random_range(-gr..gr)).collect();
    let gy: Vec<f64> = (0..3).map(|_| rng.random_range(-gr..gr)).collect();
    for y in 0..height {
        let fy = y as f64 / height as f64 - 0.5;
        for x in 0..width {
            let fx = x as f64 / width as f64 - 0.5;
            for c in 0..3 {
                canvas[(y, x, c)] = base[c] + gx[c] * fx + gy[c] * fy;
            }
        }
    }

    // Soft color blobs (terrain-like low-frequency variation).
    let n_blobs = 3;
    for _ in 0..n_blobs {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let radius = rng.random_range(height as f64 / 6.0..height as f64 / 2.0);
        let amp: Vec<f64> = (0..3).map(|_| rng.random_range(-ar..ar)).collect();
        for y in 0..height {
            for x in 0..width {
                let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (radius * radius);
                let falloff = (-d2).exp();
                for c in 0..3 {
                    canvas[(y, x, c)] += amp[c] * falloff;
                }
            }
        }
    }

    // Shapes: large targets and small targets.
    let min_small_area = SMALL_OBJECT_MIN_SIDE * SMALL_OBJECT_MIN_SIDE;
    let n_objects = 3;
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let kind = if rng.random_bool(0.5) {
            ObjectKind::Large
        } else {
            ObjectKind::Small
        };
        let (ow, oh) = match kind {
            ObjectKind::Large => {
                // area >= large_area_ratio * min small area (side 2x covers
                // ratio 4); a narrow size range keeps total edge content —
                // and with it the per-image texture-energy baseline — stable
                // across scenes.
                let side_min = ((min_small_area as f64 * 4.0).sqrt().ceil() as usize).max(24);
                let side_max = (side_min * 5 / 3).max(side_min + 1);
                (
                    rng.random_range(side_min..side_max),
                    rng.random_range(side_min..side_max),
                )
            }
            ObjectKind::Small => (
                rng.random_range(SMALL_OBJECT_MIN_SIDE..=SMALL_OBJECT_MAX_SIDE),
                rng.random_range(SMALL_OBJECT_MIN_SIDE..=SMALL_OBJECT_MAX_SIDE),
            ),
        };
        let (ow, oh) = (ow.min(width), oh.min(height));
        let x0 = rng.random_range(0..width.saturating_sub(ow).max(1));
        let y0 = rng.random_range(0..height.saturating_sub(oh).max(1));
        let bbox = Rect::new(x0, y0, x0 + ow, y0 + oh);
        let spread = 0.3 + 0.15 * k;
        let color: Vec<f64> = (0..3)
            .map(|_| rng.random_range(0.5 - spread..0.5 + spread))
            .collect();
        let ellipse = rng.random_bool(0.5);
        let (cx, cy) = (
            (bbox.x0 + bbox.x1) as f64 / 2.0,
            (bbox.y0 + bbox.y1) as f64 / 2.0,
        );
        let (rx, ry) = (ow as f64 / 2.0, oh as f64 / 2.0);
        for y in bbox.y0..bbox.y1 {
            for x in bbox.x0..bbox.x1 {
                let inside = if ellipse {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                } else {
                    true
                };
                if inside {
                    for c in 0..3 {
                        canvas[(y, x, c)] = color[c];
                    }
                }
            }
        }
        objects.push(PlacedObject {
            kind,
            bbox,
            texture_seed: rng.random(),
        });
    }

    // Sensor-like noise; the corpus models a single capture pipeline, so
    // the noise level varies only mildly across images (exposure/ISO drift).
    let sigma = 0.04;
    let mut pixels = Array3::zeros((height, width, 3));
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let v = canvas[(y, x, c)] + normal_sample(rng, 0.0, sigma);
                pixels[(y, x, c)] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }

    SyntheticScene {
        raster: RgbRaster { pixels },
        objects,
    }
}

/// Pastes `donor`'s pixels inside `rect` into `target`. The mask marks
/// exactly the pasted pixels.
pub fn tamper_splice(
    target: &RgbRaster,
    donor: &RgbRaster,
    rect: Rect,
    _seed: u64,
) -> Result<(RgbRaster, GrayRaster)> {
    rect.check_within(target.height(), target.width())?;
    rect.check_within(donor.height(), donor.width())?;
    let mut out = target.clone();
    let mut mask = GrayRaster::zeros(target.height(), target.width());
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            for c in 0..3 {
                out.pixels[(y, x, c)] = donor.pixels[(y, x, c)];
            }
        }
    }
    mask.fill_rect(rect, 255);
    Ok((out, mask))
}

/// Copies `src_rect` to the region with top-left `dst_origin`. Destination
/// pixels become exact copies of the source; the mask marks the destination
/// region only (that is where content is inauthentic).
pub fn tamper_copy_move(
    image: &RgbRaster,
    src_rect: Rect,
    dst_origin: Point,
    _seed: u64,
) -> Result<(RgbRaster, GrayRaster)> {
    src_rect.check_within(image.height(), image.width())?;
    let dst_rect = Rect::new(
        dst_origin.x,
        dst_origin.y,
        dst_origin.x + src_rect.width(),
        dst_origin.y + src_rect.height(),
    );
    dst_rect.check_within(image.height(), image.width())?;
    let mut out = image.clone();
    let patch = image.crop(src_rect)?;
    for dy in 0..src_rect.height() {
        for dx in 0..src_rect.width() {
            for c in 0..3 {
                out.pixels[(dst_rect.y0 + dy, dst_rect.x0 + dx, c)] = patch.pixels[(dy, dx, c)];
            }
        }
    }
    let mut mask = GrayRaster::zeros(image.height(), image.width());
    mask.fill_rect(dst_rect, 255);
    Ok((out, mask))
}

/// Erases the content of `rect` with the chosen fill. The mask marks the box.
pub fn tamper_removal(
    image: &RgbRaster,
    rect: Rect,
    fill: FillStrategy,
    seed: u64,
) -> Result<(RgbRaster, GrayRaster)> {
    rect.check_within(image.height(), image.width())?;
    let mut out = image.clone();
    let mut mask = GrayRaster::zeros(image.height(), image.width());
    if rect.is_empty() {
        return Ok((out, mask));
    }
    match fill {
        FillStrategy::Mean => {
            let mut sums = [0u64; 3];
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    for c in 0..3 {
                        sums[c] += u64::from(image.pixels[(y, x, c)]);
                    }
                }
            }
            let n = rect.area() as u64;
            let mean: Vec<u8> = sums.iter().map(|s| (s / n) as u8).collect();
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    for c in 0..3 {
                        out.pixels[(y, x, c)] = mean[c];
                    }
                }
            }
        }
        FillStrategy::Blur => {
            // 5x5 box blur sampled from the original image, clamped at borders.
            let (h, w) = (image.height(), image.width());
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    for c in 0..3 {
                        let mut acc = 0u32;
                        let mut cnt = 0u32;
                        for dy in -2i64..=2 {
                            for dx in -2i64..=2 {
                                let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                                let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                                acc += u32::from(image.pixels[(sy, sx, c)]);
                                cnt += 1;
                            }
                        }
                        out.pixels[(y, x, c)] = (acc / cnt) as u8;
                    }
                }
            }
        }
        FillStrategy::Noise => {
            // Gaussian noise around the region's mean color, the texture a
            // cheap inpainter leaves behind.
            let mut rng = derive_rng(seed, &[0x4e015e]);
            let mut sums = [0u64; 3];
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    for c in 0..3 {
                        sums[c] += u64::from(image.pixels[(y, x, c)]);
                    }
                }
            }
            let n = rect.area() as f64;
            let mean: Vec<f64> = sums.iter().map(|s| *s as f64 / n).collect();
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    for c in 0..3 {
                        let v = mean[c] + normal_sample(&mut rng, 0.0, 20.0);
                        out.pixels[(y, x, c)] = v.clamp(0.0, 255.0).round() as u8;
                    }
                }
            }
        }
    }
    mask.fill_rect(rect, 255);
    Ok((out, mask))
}

/// Applies a 5x5 box blur to the pixels inside `mask`, mimicking the
/// feathering/resampling step a forger uses to hide seams. This leaves the
/// tampered region with suppressed sensor noise — the low-level signature
/// real blended forgeries carry — while pixels outside the mask stay
/// bit-identical.
fn feather_inside_mask(image: &mut RgbRaster, mask: &GrayRaster) {
    let (h, w) = (image.height(), image.width());
    let snapshot = image.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.pixels[(y, x)] == 0 {
                continue;
            }
            for c in 0..3 {
                let mut acc = 0u32;
                let mut cnt = 0u32;
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += u32::from(snapshot.pixels[(sy, sx, c)]);
                        cnt += 1;
                    }
                }
                image.pixels[(y, x, c)] = (acc / cnt) as u8;
            }
        }
    }
}

fn sample_tamper_rect(rng: &mut ChaCha8Rng, cfg: &DatagenConfig, h: usize, w: usize) -> Rect {
    let small = rng.random_bool(cfg.small_fraction.clamp(0.0, 1.0));
    let (bw, bh) = if small {
        // Keep small edits near the cap: a forger shrinks an edit to evade
        // detection, not to the point where it no longer serves its purpose.
        let lo = (cfg.small_max * 2 / 3).max(4).min(cfg.small_max);
        (
            rng.random_range(lo..=cfg.small_max),
            rng.random_range(lo..=cfg.small_max),
        )
    } else {
        let lo = (h.min(w) / 6).max(16);
        let hi = (h.min(w) * 2 / 5).max(lo + 1);
        (rng.random_range(lo..hi), rng.random_range(lo..hi))
    };
    let bw = bw.min(w);
    let bh = bh.min(h);
    let x0 = rng.random_range(0..=(w - bw));
    let y0 = rng.random_range(0..=(h - bh));
    Rect::new(x0, y0, x0 + bw, y0 + bh)
}

/// Generates the full dataset. Deterministic for a fixed seed; records are
/// derived from independent per-index RNG streams.
pub fn generate_dataset(cfg: &DatagenConfig, seed: u64) -> Result<Vec<TamperRecord>> {
    cfg.validate()?;
    let total = cfg.n_real + cfg.n_fake;

    // Class plan: n_real authentic, fakes cycling the configured types,
    // then a seeded shuffle so classes interleave.
    let mut plan: Vec<TamperType> = Vec::with_capacity(total);
    plan.extend(std::iter::repeat_n(TamperType::None, cfg.n_real));
    let fake_types: Vec<TamperType> = cfg
        .types
        .iter()
        .copied()
        .filter(|t| *t != TamperType::None)
        .collect();
    for k in 0..cfg.n_fake {
        plan.push(fake_types[k % fake_types.len()]);
    }
    let mut shuffle_rng = derive_rng(seed, &[STREAM_CLASS_SHUFFLE]);
    for i in (1..plan.len()).rev() {
        let j = shuffle_rng.random_range(0..=i);
        plan.swap(i, j);
    }

    let mut records = Vec::with_capacity(total);
    for (i, &ttype) in plan.iter().enumerate() {
        let mut rng = derive_rng(seed, &[STREAM_RECORD, i as u64]);
        let h = rng.random_range(cfg.min_size..=cfg.max_size);
        let w = rng.random_range(cfg.min_size..=cfg.max_size);
        let scene = generate_scene(&mut rng, h, w, cfg.scene_contrast);
        let id = format!("img{i:05}");
        let record = match ttype {
            TamperType::None => TamperRecord {
                id,
                gt_mask: GrayRaster::zeros(h, w),
                image: scene.raster,
                tamper_type: TamperType::None,
                label: 0,
            },
            TamperType::Splice => {
                let mut donor_rng = derive_rng(seed, &[STREAM_DONOR, i as u64]);
                let donor = generate_scene(&mut donor_rng, h, w, cfg.scene_contrast);
                let rect = sample_tamper_rect(&mut rng, cfg, h, w);
                let (mut image, gt_mask) =
                    tamper_splice(&scene.raster, &donor.raster, rect, rng.random())?;
                feather_inside_mask(&mut image, &gt_mask);
                TamperRecord {
                    id,
                    image,
                    gt_mask,
                    tamper_type: TamperType::Splice,
                    label: 1,
                }
            }
            TamperType::CopyMove => {
                let rect = sample_tamper_rect(&mut rng, cfg, h, w);
                // Prefer a destination displaced by at least the patch size
                // so the moved content lands in a different color context.
                let mut dst = Point::new(0, 0);
                for _ in 0..32 {
                    let x = rng.random_range(0..=(w - rect.width()));
                    let y = rng.random_range(0..=(h - rect.height()));
                    dst = Point::new(x, y);
                    let far = x.abs_diff(rect.x0) >= rect.width()
                        || y.abs_diff(rect.y0) >= rect.height();
                    if far {
                        break;
                    }
                }
                let (mut image, gt_mask) =
                    tamper_copy_move(&scene.raster, rect, dst, rng.random())?;
                feather_inside_mask(&mut image, &gt_mask);
                TamperRecord {
                    id,
                    image,
                    gt_mask,
                    tamper_type: TamperType::CopyMove,
                    label: 1,
                }
            }
            TamperType::Removal => {
                let rect = sample_tamper_rect(&mut rng, cfg, h, w);
                let fill = match rng.random_range(0..3) {
                    0 => FillStrategy::Mean,
                    1 => FillStrategy::Blur,
                    _ => FillStrategy::Noise,
                };
                let (mut image, gt_mask) =
                    tamper_removal(&scene.raster, rect, fill, rng.random())?;
                feather_inside_mask(&mut image, &gt_mask);
                TamperRecord {
                    id,
                    image,
                    gt_mask,
                    tamper_type: TamperType::Removal,
                    label: 1,
                }
            }
        };
        records.push(record);
    }
    Ok(records)
}

/// Degrades a ground-truth mask the way a sloppy automatic localizer would:
/// dilates the true region and adds spurious background blobs.
pub fn noisy_auto_mask(gt: &GrayRaster, seed: u64) -> GrayRaster {
    let (h, w) = (gt.height(), gt.width());
    let mut rng = derive_rng(seed, &[0xb10b5]);
    let mut out = GrayRaster::zeros(h, w);

    // Dilate the true region.
    let radius = rng.random_range(2..=5) as i64;
    for y in 0..h {
        for x in 0..w {
            if gt.pixels[(y, x)] > 0 {
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                            out.pixels[(ny as usize, nx as usize)] = 255;
                        }
                    }
                }
            }
        }
    }

    // Spurious background responses (trees/roads in the motivating failure).
    let n_blobs = rng.random_range(2..=5);
    for _ in 0..n_blobs {
        let bw = rng.random_range(8..=40).min(w);
        let bh = rng.random_range(8..=40).min(h);
        let x0 = rng.random_range(0..=(w - bw));
        let y0 = rng.random_range(0..=(h - bh));
        out.fill_rect(Rect::new(x0, y0, x0 + bw, y0 + bh), 255);
    }
    out
}

/// Writes a dataset directory: `images/<id>.png`, `masks/<id>.png`,
/// `labels.csv` with columns `id,label,tamper_type`.
pub fn write_dataset(dir: &Path, records: &[TamperRecord]) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    let mut wtr = csv::Writer::from_path(dir.join("labels.csv"))?;
    wtr.write_record(["id", "label", "tamper_type"])?;
    for r in records {
        r.image.save_png(&images.join(format!("{}.png", r.id)))?;
        r.gt_mask.save_png(&masks.join(format!("{}.png", r.id)))?;
        wtr.write_record([&r.id, &r.label.to_string(), r.tamper_type.as_str()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(n_real: usize, n_fake: usize) -> DatagenConfig {
        DatagenConfig {
            n_real,
            n_fake,
            min_size: 48,
            max_size: 64,
            ..DatagenConfig::default()
        }
    }

    #[test]
    fn real_only_dataset_has_zero_masks() {
        let recs = generate_dataset(&small_cfg(2, 0), 7).unwrap();
        assert_eq!(recs.len(), 2);
        for r in &recs {
            assert_eq!(r.label, 0);
            assert_eq!(r.gt_mask.count_nonzero(), 0);
        }
    }

    #[test]
    fn fake_only_dataset_has_nonzero_masks() {
        let cfg = DatagenConfig {
            types: vec![TamperType::Splice],
            ..small_cfg(0, 3)
        };
        let recs = generate_dataset(&cfg, 7).unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            assert_eq!(r.label, 1);
            assert!(r.gt_mask.count_nonzero() > 0);
        }
    }

    #[test]
    fn invalid_size_range_is_rejected() {
        let cfg = DatagenConfig {
            min_size: 128,
            max_size: 64,
            ..DatagenConfig::default()
        };
        assert!(matches!(
            generate_dataset(&cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn label_matches_mask_over_dataset() {
        let recs = generate_dataset(&small_cfg(20, 20), 11).unwrap();
        for r in &recs {
            assert_eq!(r.label == 1, r.gt_mask.count_nonzero() > 0, "{}", r.id);
            assert_eq!(r.tamper_type == TamperType::None, r.label == 0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_cfg(3, 3), 42).unwrap();
        let b = generate_dataset(&small_cfg(3, 3), 42).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.image, rb.image);
            assert_eq!(ra.gt_mask, rb.gt_mask);
        }
    }

    #[test]
    fn splice_degenerate_and_full_boxes() {
        let mut rng = derive_rng(1, &[9]);
        let a = generate_scene(&mut rng, 32, 32, 1.0).raster;
        let b = generate_scene(&mut rng, 32, 32, 1.0).raster;
        let (img, mask) = tamper_splice(&a, &b, Rect::new(5, 5, 5, 5), 0).unwrap();
        assert_eq!(img, a);
        assert_eq!(mask.count_nonzero(), 0);
        let (_, mask) = tamper_splice(&a, &b, Rect::new(0, 0, 32, 32), 0).unwrap();
        assert_eq!(mask.count_nonzero(), 32 * 32);
    }

    #[test]
    fn splice_mask_counts_pasted_pixels() {
        let mut rng = derive_rng(2, &[9]);
        let a = generate_scene(&mut rng, 256, 256, 1.0).raster;
        let b = generate_scene(&mut rng, 256, 256, 1.0).raster;
        let rect = Rect::new(40, 60, 72, 92);
        let (img, mask) = tamper_splice(&a, &b, rect, 0).unwrap();
        assert_eq!(mask.count_nonzero(), 1024);
        // locality: untouched outside the box
        for y in 0..256 {
            for x in 0..256 {
                if !(y >= rect.y0 && y < rect.y1 && x >= rect.x0 && x < rect.x1) {
                    for c in 0..3 {
                        assert_eq!(img.pixels[(y, x, c)], a.pixels[(y, x, c)]);
                    }
                }
            }
        }
    }

    #[test]
    fn copy_move_self_copy_marks_mask() {
        let mut rng = derive_rng(3, &[9]);
        let a = generate_scene(&mut rng, 64, 64, 1.0).raster;
        let rect = Rect::new(10, 10, 26, 26);
        let (img, mask) = tamper_copy_move(&a, rect, Point::new(10, 10), 0).unwrap();
        assert_eq!(img, a);
        assert_eq!(mask.count_nonzero(), 256);
    }

    #[test]
    fn copy_move_disjoint_mask_sum() {
        let mut rng = derive_rng(4, &[9]);
        let a = generate_scene(&mut rng, 64, 64, 1.0).raster;
        let (img, mask) = tamper_copy_move(&a, Rect::new(0, 0, 16, 16), Point::new(40, 40), 0)
            .unwrap();
        assert_eq!(mask.count_nonzero(), 256);
        for dy in 0..16 {
            for dx in 0..16 {
                for c in 0..3 {
                    assert_eq!(img.pixels[(40 + dy, 40 + dx, c)], a.pixels[(dy, dx, c)]);
                }
            }
        }
    }

    #[test]
    fn copy_move_out_of_bounds_rejected() {
        let a = RgbRaster::filled(32, 32, [0, 0, 0]);
        assert!(tamper_copy_move(&a, Rect::new(0, 0, 16, 16), Point::new(20, 20), 0).is_err());
    }

    #[test]
    fn removal_mean_on_constant_image_is_identity() {
        let a = RgbRaster::filled(32, 32, [80, 90, 100]);
        let rect = Rect::new(4, 4, 20, 20);
        let (img, mask) = tamper_removal(&a, rect, FillStrategy::Mean, 0).unwrap();
        assert_eq!(img, a);
        assert_eq!(mask.count_nonzero(), 256);
    }

    #[test]
    fn removal_zero_area_is_noop() {
        let a = RgbRaster::filled(32, 32, [1, 2, 3]);
        let (img, mask) = tamper_removal(&a, Rect::new(8, 8, 8, 8), FillStrategy::Noise, 5).unwrap();
        assert_eq!(img, a);
        assert_eq!(mask.count_nonzero(), 0);
    }

    #[test]
    fn removal_noise_is_seed_deterministic() {
        let mut rng = derive_rng(5, &[9]);
        let a = generate_scene(&mut rng, 48, 48, 1.0).raster;
        let rect = Rect::new(8, 8, 24, 24);
        let (x, _) = tamper_removal(&a, rect, FillStrategy::Noise, 77).unwrap();
        let (y, _) = tamper_removal(&a, rect, FillStrategy::Noise, 77).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn scene_objects_lie_in_bounds() {
        for s in 0..5u64 {
            let mut rng = derive_rng(s, &[9]);
            let scene = generate_scene(&mut rng, 64, 80, 1.0);
            for o in &scene.objects {
                o.bbox.check_within(64, 80).unwrap();
            }
        }
    }
}
