//! On-disk dataset layout and sample loading.
//!
//! A dataset directory holds `images/<id>.png`, optional `masks/<id>.png`,
//! and `labels.csv` with columns `id,label,tamper_type`.

use std::path::Path;

use crate::datagen::TamperType;
use crate::error::{Error, Result};
use crate::maskops::{self, MaskIndexEntry, Provenance, PseudoMask};
use crate::raster::RgbRaster;

/// One image with its authenticity label and (optionally) a pseudo-mask.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub image: RgbRaster,
    /// 1 = tampered, 0 = authentic.
    pub label: u8,
    pub mask: Option<PseudoMask>,
}

#[derive(Debug, Clone)]
pub struct LabelRow {
    pub id: String,
    pub label: u8,
    pub tamper_type: TamperType,
}

pub fn read_labels(dir: &Path) -> Result<Vec<LabelRow>> {
    let path = dir.join("labels.csv");
    if !path.exists() {
        return Err(Error::Data(format!(
            "no labels.csv in {}",
            dir.display()
        )));
    }
    let mut rdr = csv::Reader::from_path(&path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        if row.len() != 3 {
            return Err(Error::Data(format!(
                "labels.csv row has {} fields, expected 3",
                row.len()
            )));
        }
        let label: u8 = row[1]
            .trim()
            .parse()
            .map_err(|e| Error::Data(format!("bad label `{}`: {e}", &row[1])))?;
        out.push(LabelRow {
            id: row[0].to_string(),
            label,
            tamper_type: TamperType::parse(row[2].trim())?,
        });
    }
    Ok(out)
}

/// Loads every sample listed in `labels.csv`, attaching pseudo-masks from
/// `masks_dir` when given. Tampered samples must have a mask file; authentic
/// samples without one get an all-zero mask.
pub fn load_samples(
    data_dir: &Path,
    masks_dir: Option<&Path>,
    provenance: Provenance,
) -> Result<Vec<ImageSample>> {
    let rows = read_labels(data_dir)?;
    let images_dir = data_dir.join("images");
    let mut samples = Vec::with_capacity(rows.len());
    for row in &rows {
        let image = RgbRaster::load_png(&images_dir.join(format!("{}.png", row.id)))?;
        samples.push(ImageSample {
            id: row.id.clone(),
            image,
            label: row.label,
            mask: None,
        });
    }
    if let Some(masks_dir) = masks_dir {
        let index: Vec<MaskIndexEntry> = samples
            .iter()
            .map(|s| MaskIndexEntry {
                id: s.id.clone(),
                height: s.image.height(),
                width: s.image.width(),
                tampered: s.label == 1,
            })
            .collect();
        let mut masks = maskops::ingest_masks(masks_dir, &index)?;
        for s in &mut samples {
            let mut mask = masks.remove(&s.id).expect("ingest covers the index");
            mask.provenance = provenance;
            s.mask = Some(mask);
        }
    }
    Ok(samples)
}
