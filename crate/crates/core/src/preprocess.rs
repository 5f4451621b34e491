//! Image pipeline: intensity normalization, corner-aligned bilinear
//! resizing, channel replication, and CLAHE contrast enhancement.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Single-channel image. Pixels are stored as f64 and are either raw
/// integer levels in [0, 2^bits - 1] or normalized intensities in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub bits: u8,
    pub normalized: bool,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn from_levels(height: usize, width: usize, bits: u8, levels: Vec<u32>) -> Result<Self> {
        if bits != 8 && bits != 16 {
            return Err(CoreError::domain("bit depth must be 8 or 16"));
        }
        if levels.len() != height * width {
            return Err(CoreError::shape(format!(
                "{}x{} image needs {} pixels, got {}",
                height,
                width,
                height * width,
                levels.len()
            )));
        }
        let max = (1u32 << bits) - 1;
        if let Some(v) = levels.iter().find(|&&v| v > max) {
            return Err(CoreError::domain(format!(
                "pixel value {} exceeds {}-bit range",
                v, bits
            )));
        }
        Ok(GrayImage {
            height,
            width,
            bits,
            normalized: false,
            pixels: levels.into_iter().map(|v| v as f64).collect(),
        })
    }

    pub fn from_normalized(height: usize, width: usize, bits: u8, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(CoreError::shape("pixel count does not match dimensions"));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::domain("normalized pixels must lie in [0,1]"));
        }
        Ok(GrayImage {
            height,
            width,
            bits,
            normalized: true,
            pixels,
        })
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn max_level(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Integer levels; normalized images are quantized back to the grid.
    pub fn levels(&self) -> Vec<u32> {
        let max = self.max_level() as f64;
        if self.normalized {
            self.pixels.iter().map(|&v| (v * max).round() as u32).collect()
        } else {
            self.pixels.iter().map(|&v| v as u32).collect()
        }
    }

    /// pixel / (2^bits - 1); order-preserving.
    pub fn normalize(&self) -> Result<GrayImage> {
        if self.normalized {
            return Ok(self.clone());
        }
        let max = self.max_level() as f64;
        GrayImage::from_normalized(
            self.height,
            self.width,
            self.bits,
            self.pixels.iter().map(|&v| v / max).collect(),
        )
    }

    /// Corner-aligned bilinear resize on a normalized image.
    pub fn resize_bilinear(&self, target: (usize, usize)) -> Result<GrayImage> {
        let (oh, ow) = target;
        if oh < 2 || ow < 2 {
            return Err(CoreError::domain(format!(
                "degenerate resize target {}x{}",
                oh, ow
            )));
        }
        if self.height < 2 || self.width < 2 {
            return Err(CoreError::domain("source extents must be at least 2"));
        }
        let sy = (self.height - 1) as f64 / (oh - 1) as f64;
        let sx = (self.width - 1) as f64 / (ow - 1) as f64;
        let mut out = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let fy = y as f64 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..ow {
                let fx = x as f64 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let p00 = self.pixels[y0 * self.width + x0];
                let p01 = self.pixels[y0 * self.width + x1];
                let p10 = self.pixels[y1 * self.width + x0];
                let p11 = self.pixels[y1 * self.width + x1];
                let top = p00 * (1.0 - wx) + p01 * wx;
                let bot = p10 * (1.0 - wx) + p11 * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
        Ok(GrayImage {
            height: oh,
            width: ow,
            bits: self.bits,
            normalized: self.normalized,
            pixels: out,
        })
    }

    /// (H, W, C) tensor with every channel an exact copy of the image.
    pub fn replicate_channels(&self, channels: usize) -> Result<Tensor> {
        if channels == 0 {
            return Err(CoreError::domain("channel count must be at least 1"));
        }
        let mut data = Vec::with_capacity(self.pixels.len() * channels);
        for &v in &self.pixels {
            for _ in 0..channels {
                data.push(v);
            }
        }
        Tensor::from_vec(&[self.height, self.width, channels], data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaheConfig {
    /// Clip threshold as a multiple of the uniform histogram bin height.
    pub clip_limit: f64,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub bins: usize,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        ClaheConfig {
            clip_limit: 2.0,
            tile_rows: 8,
            tile_cols: 8,
            bins: 256,
        }
    }
}

impl ClaheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_limit < 1.0 {
            return Err(CoreError::domain("clip_limit must be >= 1"));
        }
        if self.tile_rows == 0 || self.tile_cols == 0 || self.bins == 0 {
            return Err(CoreError::domain("tile grid and bins must be positive"));
        }
        Ok(())
    }
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

/// Per-tile equalization mapping: clipped histogram, uniformly
/// redistributed excess, CDF as the bin-to-intensity lookup table.
fn tile_mapping(pixels: &[f64], indices: &[usize], cfg: &ClaheConfig) -> Vec<f64> {
    let n = indices.len() as f64;
    let mut hist = vec![0.0f64; cfg.bins];
    for &i in indices {
        hist[bin_of(pixels[i], cfg.bins)] += 1.0;
    }
    let limit = cfg.clip_limit * n / cfg.bins as f64;
    // Clip and redistribute until the redistributed mass itself stops
    // spilling over the limit; at clip_limit = 1 this converges to the
    // uniform histogram.
    for _ in 0..100 {
        let mut excess = 0.0;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        if excess <= n * 1e-12 {
            break;
        }
        let bonus = excess / cfg.bins as f64;
        hist.iter_mut().for_each(|h| *h += bonus);
    }
    let mut cdf = 0.0;
    hist.iter()
        .map(|h| {
            cdf += h;
            cdf / n
        })
        .collect()
}

/// Contrast-limited adaptive histogram equalization on a normalized image.
///
/// The image is edge-padded to a multiple of the tile size, per-tile
/// mappings are computed on the padded grid, each pixel is remapped by
/// bilinear interpolation between the four nearest tile mappings, and the
/// result is cropped back. Constant images are returned unchanged.
pub fn clahe(image: &GrayImage, cfg: &ClaheConfig) -> Result<GrayImage> {
    cfg.validate()?;
    if !image.normalized {
        return Err(CoreError::domain("clahe expects a normalized image"));
    }
    if image.height < cfg.tile_rows || image.width < cfg.tile_cols {
        return Err(CoreError::domain(format!(
            "{}x{} image smaller than one {}x{} tile per grid cell",
            image.height, image.width, cfg.tile_rows, cfg.tile_cols
        )));
    }
    let lo = image.pixels.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(image.clone());
    }

    let tile_h = image.height.div_ceil(cfg.tile_rows);
    let tile_w = image.width.div_ceil(cfg.tile_cols);
    let ph = tile_h * cfg.tile_rows;
    let pw = tile_w * cfg.tile_cols;

    // Edge-replicated padding.
    let mut padded = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        let sy = y.min(image.height - 1);
        for x in 0..pw {
            let sx = x.min(image.width - 1);
            padded.push(image.pixels[sy * image.width + sx]);
        }
    }

    let mut mappings = Vec::with_capacity(cfg.tile_rows * cfg.tile_cols);
    for ty in 0..cfg.tile_rows {
        for tx in 0..cfg.tile_cols {
            let mut indices = Vec::with_capacity(tile_h * tile_w);
            for y in ty * tile_h..(ty + 1) * tile_h {
                for x in tx * tile_w..(tx + 1) * tile_w {
                    indices.push(y * pw + x);
                }
            }
            mappings.push(tile_mapping(&padded, &indices, cfg));
        }
    }

    // Interpolate between tile-center mappings; clamp beyond the centers.
    let mut out = Vec::with_capacity(image.height * image.width);
    for y in 0..image.height {
        let fy = (y as f64 + 0.5) / tile_h as f64 - 0.5;
        let t0y = (fy.floor().max(0.0) as usize).min(cfg.tile_rows - 1);
        let t1y = (t0y + 1).min(cfg.tile_rows - 1);
        let wy = (fy - fy.floor()).clamp(0.0, 1.0);
        let wy = if fy < 0.0 { 0.0 } else { wy };
        for x in 0..image.width {
            let fx = (x as f64 + 0.5) / tile_w as f64 - 0.5;
            let t0x = (fx.floor().max(0.0) as usize).min(cfg.tile_cols - 1);
            let t1x = (t0x + 1).min(cfg.tile_cols - 1);
            let wx = (fx - fx.floor()).clamp(0.0, 1.0);
            let wx = if fx < 0.0 { 0.0 } else { wx };

            let b = bin_of(image.pixels[y * image.width + x], cfg.bins);
            let m00 = mappings[t0y * cfg.tile_cols + t0x][b];
            let m01 = mappings[t0y * cfg.tile_cols + t1x][b];
            let m10 = mappings[t1y * cfg.tile_cols + t0x][b];
            let m11 = mappings[t1y * cfg.tile_cols + t1x][b];
            let top = m00 * (1.0 - wx) + m01 * wx;
            let bot = m10 * (1.0 - wx) + m11 * wx;
            out.push((top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0));
        }
    }
    GrayImage::from_normalized(image.height, image.width, image.bits, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints() {
        let img = GrayImage::from_levels(1, 2, 8, vec![0, 255]).unwrap();
        let n = img.normalize().unwrap();
        assert_eq!(n.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn normalize_16_bit_midpoint() {
        let img = GrayImage::from_levels(1, 1, 16, vec![32768]).unwrap();
        let n = img.normalize().unwrap();
        assert!((n.pixels()[0] - 32768.0 / 65535.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_level_rejected() {
        assert!(GrayImage::from_levels(1, 1, 8, vec![256]).is_err());
    }

    #[test]
    fn resize_identity() {
        let img = GrayImage::from_normalized(2, 3, 8, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.resize_bilinear((2, 3)).unwrap(), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = GrayImage::from_normalized(2, 2, 8, vec![0.25; 4]).unwrap();
        let r = img.resize_bilinear((5, 7)).unwrap();
        for &v in r.pixels() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_2x2_to_2x4_hand_weights() {
        let img = GrayImage::from_normalized(2, 2, 8, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = img.resize_bilinear((2, 4)).unwrap();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for row in 0..2 {
            for (x, e) in expected.iter().enumerate() {
                assert!((r.pixels()[row * 4 + x] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_rejects_degenerate_target() {
        let img = GrayImage::from_normalized(2, 2, 8, vec![0.0; 4]).unwrap();
        assert!(img.resize_bilinear((1, 4)).is_err());
    }

    #[test]
    fn replicate_channels_copies() {
        let img = GrayImage::from_normalized(1, 2, 8, vec![0.2, 0.8]).unwrap();
        let t = img.replicate_channels(3).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data(), &[0.2, 0.2, 0.2, 0.8, 0.8, 0.8]);
        let one = img.replicate_channels(1).unwrap();
        assert_eq!(one.shape(), &[1, 2, 1]);
        assert_eq!(one.data(), img.pixels());
    }

    #[test]
    fn clahe_constant_image_is_fixed_point() {
        let img = GrayImage::from_normalized(16, 16, 8, vec![0.37; 256]).unwrap();
        let out = clahe(&img, &ClaheConfig::default()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn clahe_clip_limit_one_is_near_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pixels: Vec<f64> = (0..1024).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let img = GrayImage::from_normalized(32, 32, 8, pixels).unwrap();
        let cfg = ClaheConfig {
            clip_limit: 1.0,
            ..Default::default()
        };
        let out = clahe(&img, &cfg).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() <= 1.5 / 256.0, "{} vs {}", a, b);
        }
    }

    #[test]
    fn clahe_output_in_unit_interval() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let pixels: Vec<f64> = (0..4096).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let img = GrayImage::from_normalized(64, 64, 8, pixels).unwrap();
        let out = clahe(&img, &ClaheConfig::default()).unwrap();
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn clahe_rejects_tiny_images() {
        let img = GrayImage::from_normalized(4, 4, 8, vec![0.5; 16]).unwrap();
        let cfg = ClaheConfig {
            tile_rows: 8,
            tile_cols: 8,
            ..Default::default()
        };
        assert!(clahe(&img, &cfg).is_err());
    }
}
