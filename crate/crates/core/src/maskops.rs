//! Pseudo-mask handling: ingestion of externally produced masks, manual box
//! calibration, mask-aware random crop with label reset, and projection of
//! pixel masks onto the encoder's patch grid.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::raster::GrayRaster;
use crate::rng::derive_rng;

/// A pixel counts as tampered when its mask value exceeds this; masks are
/// soft in [0,1] but labels and grid targets need a presence notion.
pub const TAMPER_PRESENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Auto,
    BoxCalibrated,
    SyntheticGt,
}

/// Per-pixel tamper map in [0,1], aligned to one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub values: Array2<f64>,
    pub provenance: Provenance,
    pub source_id: String,
}

impl PseudoMask {
    pub fn zeros(height: usize, width: usize, provenance: Provenance, id: &str) -> PseudoMask {
        PseudoMask {
            values: Array2::zeros((height, width)),
            provenance,
            source_id: id.to_string(),
        }
    }

    /// Normalizes an 8-bit mask raster to [0,1].
    pub fn from_gray(gray: &GrayRaster, provenance: Provenance, id: &str) -> PseudoMask {
        PseudoMask {
            values: gray.pixels.mapv(|v| f64::from(v) / 255.0),
            provenance,
            source_id: id.to_string(),
        }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn count_tampered(&self) -> usize {
        self.values
            .iter()
            .filter(|&&v| v > TAMPER_PRESENCE_THRESHOLD)
            .count()
    }

    pub fn crop(&self, rect: Rect) -> Result<PseudoMask> {
        rect.check_within(self.height(), self.width())?;
        Ok(PseudoMask {
            values: self
                .values
                .slice(ndarray::s![rect.y0..rect.y1, rect.x0..rect.x1])
                .to_owned(),
            provenance: self.provenance,
            source_id: self.source_id.clone(),
        })
    }

    pub fn to_gray(&self) -> GrayRaster {
        GrayRaster {
            pixels: self
                .values
                .mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        }
    }
}

/// Manual rectangle annotations for one image; an empty list declares the
/// automatic mask fully wrong and yields an all-zero calibrated mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub image_id: String,
    pub boxes: Vec<Rect>,
}

/// What `ingest_masks` needs to know about each image in the index.
#[derive(Debug, Clone)]
pub struct MaskIndexEntry {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub tampered: bool,
}

/// Loads externally produced mask files for every image in the index.
///
/// A missing file for a tampered image is an ingestion error; authentic
/// images without a file get an all-zero mask. Dimensions must match the
/// paired image exactly.
pub fn ingest_masks(
    mask_dir: &Path,
    index: &[MaskIndexEntry],
) -> Result<BTreeMap<String, PseudoMask>> {
    let mut out = BTreeMap::new();
    for entry in index {
        let path = mask_dir.join(format!("{}.png", entry.id));
        if !path.exists() {
            if entry.tampered {
                return Err(Error::Ingestion(format!(
                    "missing mask file for tampered image `{}`",
                    entry.id
                )));
            }
            out.insert(
                entry.id.clone(),
                PseudoMask::zeros(entry.height, entry.width, Provenance::Auto, &entry.id),
            );
            continue;
        }
        let gray = GrayRaster::load_png(&path)?;
        if gray.height() != entry.height || gray.width() != entry.width {
            return Err(Error::Ingestion(format!(
                "mask `{}` is {}x{} but image is {}x{}",
                entry.id,
                gray.height(),
                gray.width(),
                entry.height,
                entry.width
            )));
        }
        out.insert(
            entry.id.clone(),
            PseudoMask::from_gray(&gray, Provenance::Auto, &entry.id),
        );
    }
    Ok(out)
}

/// Replaces an automatic mask by the rasterization of manual boxes: 1 inside
/// the union of boxes, 0 elsewhere.
pub fn calibrate_with_boxes(mask: &PseudoMask, ann: &BoxAnnotation) -> Result<PseudoMask> {
    if ann.image_id != mask.source_id {
        return Err(Error::Argument(format!(
            "annotation `{}` does not match mask `{}`",
            ann.image_id, mask.source_id
        )));
    }
    let (h, w) = (mask.height(), mask.width());
    let mut values = Array2::zeros((h, w));
    for rect in &ann.boxes {
        rect.check_within(h, w)?;
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                values[(y, x)] = 1.0;
            }
        }
    }
    Ok(PseudoMask {
        values,
        provenance: Provenance::BoxCalibrated,
        source_id: mask.source_id.clone(),
    })
}

/// Brute-force relabel rule for a cropped mask: tampered iff the crop holds
/// at least one tampered pixel and the tampered fraction reaches the
/// threshold.
pub fn relabel_from_mask(values: &Array2<f64>, overlap_threshold: f64) -> u8 {
    let tampered = values
        .iter()
        .filter(|&&v| v > TAMPER_PRESENCE_THRESHOLD)
        .count();
    let frac = tampered as f64 / values.len() as f64;
    u8::from(tampered >= 1 && frac >= overlap_threshold)
}

/// Crops image and mask identically at a seeded random position and resets
/// the image-level label from the cropped mask.
pub fn random_crop_with_label_reset(
    sample: &ImageSample,
    crop_size: (usize, usize),
    overlap_threshold: f64,
    rng_seed: u64,
) -> Result<ImageSample> {
    let (ch, cw) = crop_size;
    let (h, w) = (sample.image.height(), sample.image.width());
    if ch > h || cw > w {
        return Err(Error::Argument(format!(
            "crop {ch}x{cw} larger than image {h}x{w}"
        )));
    }
    let mask = sample.mask.as_ref().ok_or_else(|| {
        Error::Data(format!("sample `{}` has no pseudo-mask", sample.id))
    })?;
    let mut rng = derive_rng(rng_seed, &[0xc209]);
    let y0 = rng.random_range(0..=(h - ch));
    let x0 = rng.random_range(0..=(w - cw));
    let rect = Rect::new(x0, y0, x0 + cw, y0 + ch);
    let image = sample.image.crop(rect)?;
    let mask = mask.crop(rect)?;
    let label = relabel_from_mask(&mask.values, overlap_threshold);
    Ok(ImageSample {
        id: sample.id.clone(),
        image,
        label,
        mask: Some(mask),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridRule {
    Mean,
    Max,
}

/// Mask projected to the encoder's patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMask {
    pub values: Array2<f64>,
}

/// Aggregates pixel blocks onto an `grid_h x grid_w` grid. Blocks partition
/// the mask; when the grid divides the mask dims exactly, all blocks are
/// equal-sized.
pub fn mask_to_grid(
    values: &Array2<f64>,
    grid_h: usize,
    grid_w: usize,
    rule: GridRule,
) -> Result<GridMask> {
    let (h, w) = (values.shape()[0], values.shape()[1]);
    if grid_h == 0 || grid_w == 0 || grid_h > h || grid_w > w {
        return Err(Error::Argument(format!(
            "grid {grid_h}x{grid_w} invalid for {h}x{w} mask"
        )));
    }
    let mut out = Array2::zeros((grid_h, grid_w));
    for gy in 0..grid_h {
        let y0 = gy * h / grid_h;
        let y1 = (gy + 1) * h / grid_h;
        for gx in 0..grid_w {
            let x0 = gx * w / grid_w;
            let x1 = (gx + 1) * w / grid_w;
            let block = values.slice(ndarray::s![y0..y1, x0..x1]);
            out[(gy, gx)] = match rule {
                GridRule::Mean => block.mean().unwrap_or(0.0),
                GridRule::Max => block.iter().copied().fold(0.0, f64::max),
            };
        }
    }
    Ok(GridMask { values: out })
}

/// Tight bounding box of the nonzero region, as a one-box annotation
/// (empty when the mask is all zero).
pub fn boxes_from_mask(mask: &GrayRaster, image_id: &str) -> BoxAnnotation {
    let (h, w) = (mask.height(), mask.width());
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask.pixels[(y, x)] > 0 {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    BoxAnnotation {
        image_id: image_id.to_string(),
        boxes: if any {
            vec![Rect::new(x0, y0, x1, y1)]
        } else {
            vec![]
        },
    }
}

/// Reads box annotations: CSV `image_id,x0,y0,x1,y1`, one row per box,
/// image ids may repeat. An id listed in the file with no valid rows is not
/// representable; absence of an id means "no annotation".
pub fn read_box_annotations(path: &Path) -> Result<BTreeMap<String, BoxAnnotation>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<String, BoxAnnotation> = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        if row.len() != 5 {
            return Err(Error::Ingestion(format!(
                "box annotation row has {} fields, expected 5",
                row.len()
            )));
        }
        let id = row[0].to_string();
        let nums: Vec<usize> = row
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Ingestion(format!("bad coordinate `{s}`: {e}")))
            })
            .collect::<Result<_>>()?;
        let rect = Rect::new(nums[0], nums[1], nums[2], nums[3]);
        out.entry(id.clone())
            .or_insert_with(|| BoxAnnotation {
                image_id: id,
                boxes: vec![],
            })
            .boxes
            .push(rect);
    }
    Ok(out)
}

pub fn write_box_annotations(path: &Path, anns: &[BoxAnnotation]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["image_id", "x0", "y0", "x1", "y1"])?;
    for ann in anns {
        for b in &ann.boxes {
            wtr.write_record([
                ann.image_id.as_str(),
                &b.x0.to_string(),
                &b.y0.to_string(),
                &b.x1.to_string(),
                &b.y1.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RgbRaster;

    fn mask_of(h: usize, w: usize, ones: &[(usize, usize)]) -> PseudoMask {
        let mut values = Array2::zeros((h, w));
        for &(y, x) in ones {
            values[(y, x)] = 1.0;
        }
        PseudoMask {
            values,
            provenance: Provenance::Auto,
            source_id: "m".into(),
        }
    }

    #[test]
    fn calibration_rasterizes_union_of_boxes() {
        let noisy = mask_of(100, 100, &[(3, 3), (50, 50), (99, 99)]);
        let ann = BoxAnnotation {
            image_id: "m".into(),
            boxes: vec![Rect::new(0, 0, 10, 10), Rect::new(20, 20, 30, 30)],
        };
        let cal = calibrate_with_boxes(&noisy, &ann).unwrap();
        assert_eq!(cal.count_tampered(), 200);
        assert_eq!(cal.provenance, Provenance::BoxCalibrated);
        // idempotent under re-application
        let again = calibrate_with_boxes(&cal, &ann).unwrap();
        assert_eq!(cal.values, again.values);
    }

    #[test]
    fn empty_annotation_yields_zero_mask() {
        let noisy = mask_of(10, 10, &[(1, 1)]);
        let ann = BoxAnnotation {
            image_id: "m".into(),
            boxes: vec![],
        };
        let cal = calibrate_with_boxes(&noisy, &ann).unwrap();
        assert_eq!(cal.count_tampered(), 0);
    }

    #[test]
    fn full_image_box_yields_all_ones() {
        let noisy = mask_of(8, 8, &[]);
        let ann = BoxAnnotation {
            image_id: "m".into(),
            boxes: vec![Rect::new(0, 0, 8, 8)],
        };
        let cal = calibrate_with_boxes(&noisy, &ann).unwrap();
        assert_eq!(cal.count_tampered(), 64);
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let noisy = mask_of(8, 8, &[]);
        let ann = BoxAnnotation {
            image_id: "m".into(),
            boxes: vec![Rect::new(0, 0, 9, 8)],
        };
        assert!(calibrate_with_boxes(&noisy, &ann).is_err());
    }

    #[test]
    fn grid_projection_mean_hand_case() {
        // 4x4 mask with a single 1; 2x2 grid; containing cell mean = 0.25
        let mut values = Array2::zeros((4, 4));
        values[(0, 1)] = 1.0;
        let g = mask_to_grid(&values, 2, 2, GridRule::Mean).unwrap();
        assert_eq!(g.values[(0, 0)], 0.25);
        assert_eq!(g.values[(0, 1)], 0.0);
        assert_eq!(g.values[(1, 0)], 0.0);
        assert_eq!(g.values[(1, 1)], 0.0);
    }

    #[test]
    fn grid_projection_max_preserves_presence() {
        let mut values = Array2::zeros((16, 16));
        values[(9, 9)] = 1.0;
        let g = mask_to_grid(&values, 4, 4, GridRule::Max).unwrap();
        assert_eq!(g.values[(2, 2)], 1.0);
        let total: f64 = g.values.sum();
        assert_eq!(total, 1.0);
        let zero = Array2::zeros((16, 16));
        let gz = mask_to_grid(&zero, 4, 4, GridRule::Max).unwrap();
        assert_eq!(gz.values.sum(), 0.0);
    }

    #[test]
    fn grid_projection_mean_preserves_global_mean_when_divisible() {
        let mut rng = derive_rng(3, &[1]);
        let values = Array2::from_shape_fn((12, 8), |_| rng.random_range(0.0..1.0));
        let g = mask_to_grid(&values, 4, 4, GridRule::Mean).unwrap();
        let a = values.mean().unwrap();
        let b = g.values.mean().unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn crop_relabel_threshold_rule() {
        // 64x64 crop over a mask with exactly 40 tampered px inside
        let mut values = Array2::zeros((64, 64));
        for i in 0..40 {
            values[(10, i)] = 1.0;
        }
        // 40/4096 ~ 0.0098 < 0.01 -> label 0
        assert_eq!(relabel_from_mask(&values, 0.01), 0);
        // default threshold 0: any tampered pixel -> 1
        assert_eq!(relabel_from_mask(&values, 0.0), 1);
        let zeros = Array2::zeros((64, 64));
        assert_eq!(relabel_from_mask(&zeros, 0.0), 0);
    }

    #[test]
    fn crop_is_deterministic_and_consistent() {
        let image = RgbRaster::filled(32, 48, [5, 5, 5]);
        let mut mask = PseudoMask::zeros(32, 48, Provenance::SyntheticGt, "s");
        mask.values[(16, 20)] = 1.0;
        let sample = ImageSample {
            id: "s".into(),
            image,
            label: 1,
            mask: Some(mask),
        };
        let a = random_crop_with_label_reset(&sample, (16, 16), 0.0, 99).unwrap();
        let b = random_crop_with_label_reset(&sample, (16, 16), 0.0, 99).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.label, b.label);
        let m = a.mask.as_ref().unwrap();
        assert_eq!(a.label, relabel_from_mask(&m.values, 0.0));
    }

    #[test]
    fn crop_larger_than_image_rejected() {
        let sample = ImageSample {
            id: "s".into(),
            image: RgbRaster::filled(16, 16, [0, 0, 0]),
            label: 0,
            mask: Some(PseudoMask::zeros(16, 16, Provenance::SyntheticGt, "s")),
        };
        assert!(random_crop_with_label_reset(&sample, (32, 16), 0.0, 1).is_err());
    }

    #[test]
    fn boxes_from_mask_tight_bbox() {
        let mut gray = GrayRaster::zeros(20, 20);
        gray.pixels[(3, 4)] = 255;
        gray.pixels[(7, 9)] = 255;
        let ann = boxes_from_mask(&gray, "x");
        assert_eq!(ann.boxes, vec![Rect::new(4, 3, 10, 8)]);
        let empty = boxes_from_mask(&GrayRaster::zeros(4, 4), "x");
        assert!(empty.boxes.is_empty());
    }
}
