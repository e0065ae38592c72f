//! 8-bit RGB and grayscale rasters with PNG round-trip, plus the few
//! geometric transforms the pipeline needs (crop, flips, edge padding).
//!
//! Resampling is deliberately confined to [`resize_bilinear`]; it bumps a
//! process-wide counter so the no-resize inference contract can be checked
//! by instrumentation rather than by convention.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geom::Rect;

/// Number of resampling calls made by this process.
static RESAMPLE_CALLS: AtomicU64 = AtomicU64::new(0);

pub fn resample_call_count() -> u64 {
    RESAMPLE_CALLS.load(Ordering::SeqCst)
}

pub fn reset_resample_call_count() {
    RESAMPLE_CALLS.store(0, Ordering::SeqCst);
}

/// Interleaved 8-bit RGB raster, shape `(height, width, 3)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbRaster {
    pub pixels: Array3<u8>,
}

impl RgbRaster {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> RgbRaster {
        let mut pixels = Array3::zeros((height, width, 3));
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels[(y, x, c)] = rgb[c];
                }
            }
        }
        RgbRaster { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn crop(&self, rect: Rect) -> Result<RgbRaster> {
        rect.check_within(self.height(), self.width())?;
        let view = self
            .pixels
            .slice(ndarray::s![rect.y0..rect.y1, rect.x0..rect.x1, ..]);
        Ok(RgbRaster {
            pixels: view.to_owned(),
        })
    }

    pub fn flip_horizontal(&self) -> RgbRaster {
        RgbRaster {
            pixels: self.pixels.slice(ndarray::s![.., ..;-1, ..]).to_owned(),
        }
    }

    pub fn flip_vertical(&self) -> RgbRaster {
        RgbRaster {
            pixels: self.pixels.slice(ndarray::s![..;-1, .., ..]).to_owned(),
        }
    }

    /// Converts to a channel-first float tensor in [0,1], shape `(3, H, W)`.
    pub fn to_unit_tensor(&self) -> Array3<f64> {
        let (h, w) = (self.height(), self.width());
        let mut t = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    t[(c, y, x)] = f64::from(self.pixels[(y, x, c)]) / 255.0;
                }
            }
        }
        t
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let flat: Vec<u8> = self.pixels.iter().copied().collect();
        let img = image::RgbImage::from_raw(w as u32, h as u32, flat)
            .ok_or_else(|| Error::Argument("raster buffer size mismatch".into()))?;
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<RgbRaster> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = Array3::from_shape_vec((h, w, 3), img.into_raw())
            .map_err(|e| Error::Argument(e.to_string()))?;
        Ok(RgbRaster { pixels })
    }
}

/// Single-channel 8-bit raster, shape `(height, width)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayRaster {
    pub pixels: Array2<u8>,
}

impl GrayRaster {
    pub fn zeros(height: usize, width: usize) -> GrayRaster {
        GrayRaster {
            pixels: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn count_nonzero(&self) -> usize {
        self.pixels.iter().filter(|&&v| v > 0).count()
    }

    pub fn fill_rect(&mut self, rect: Rect, value: u8) {
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                self.pixels[(y, x)] = value;
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let flat: Vec<u8> = self.pixels.iter().copied().collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, flat)
            .ok_or_else(|| Error::Argument("raster buffer size mismatch".into()))?;
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<GrayRaster> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = Array2::from_shape_vec((h, w), img.into_raw())
            .map_err(|e| Error::Argument(e.to_string()))?;
        Ok(GrayRaster { pixels })
    }
}

/// Pads a channel-first tensor to `(3, new_h, new_w)` by edge replication
/// on the bottom/right. Never resamples.
pub fn pad_edge_replicate(t: &Array3<f64>, new_h: usize, new_w: usize) -> Array3<f64> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert!(new_h >= h && new_w >= w);
    let mut out = Array3::zeros((c, new_h, new_w));
    for ch in 0..c {
        for y in 0..new_h {
            let sy = y.min(h - 1);
            for x in 0..new_w {
                let sx = x.min(w - 1);
                out[(ch, y, x)] = t[(ch, sy, sx)];
            }
        }
    }
    out
}

/// Bilinear resize. The only resampling primitive in the crate; increments
/// the process resample counter on every call.
pub fn resize_bilinear(src: &RgbRaster, new_h: usize, new_w: usize) -> RgbRaster {
    RESAMPLE_CALLS.fetch_add(1, Ordering::SeqCst);
    let (h, w) = (src.height(), src.width());
    let mut out = Array3::zeros((new_h, new_w, 3));
    for y in 0..new_h {
        let fy = if new_h > 1 {
            y as f64 * (h - 1) as f64 / (new_h - 1) as f64
        } else {
            0.0
        };
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..new_w {
            let fx = if new_w > 1 {
                x as f64 * (w - 1) as f64 / (new_w - 1) as f64
            } else {
                0.0
            };
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for c in 0..3 {
                let p00 = f64::from(src.pixels[(y0, x0, c)]);
                let p01 = f64::from(src.pixels[(y0, x1, c)]);
                let p10 = f64::from(src.pixels[(y1, x0, c)]);
                let p11 = f64::from(src.pixels[(y1, x1, c)]);
                let v = p00 * (1.0 - ty) * (1.0 - tx)
                    + p01 * (1.0 - ty) * tx
                    + p10 * ty * (1.0 - tx)
                    + p11 * ty * tx;
                out[(y, x, c)] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbRaster { pixels: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let mut r = RgbRaster::filled(5, 7, [10, 20, 30]);
        r.pixels[(2, 3, 1)] = 200;
        let dir = std::env::temp_dir().join("tamperdet_raster_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("rt.png");
        r.save_png(&p).unwrap();
        let back = RgbRaster::load_png(&p).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn pad_replicates_edges() {
        let r = RgbRaster::filled(2, 2, [255, 0, 0]);
        let t = r.to_unit_tensor();
        let p = pad_edge_replicate(&t, 4, 3);
        assert_eq!(p.shape(), &[3, 4, 3]);
        assert_eq!(p[(0, 3, 2)], 1.0);
        assert_eq!(p[(1, 3, 2)], 0.0);
    }

    #[test]
    fn resize_increments_counter() {
        let before = resample_call_count();
        let r = RgbRaster::filled(4, 4, [1, 2, 3]);
        let _ = resize_bilinear(&r, 8, 8);
        assert_eq!(resample_call_count(), before + 1);
    }
}
