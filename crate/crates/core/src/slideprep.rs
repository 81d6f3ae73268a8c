//! Slide ingestion: grayscale rasters, Otsu tissue detection, grid tiling,
//! tissue-area QC, handcrafted tile features and the binary bag format.
//!
//! # Bag file layout
//!
//! All integers little-endian.
//!
//! | field          | type                       |
//! |----------------|----------------------------|
//! | magic          | `b"MILB"`                  |
//! | version        | `u32` = 1                  |
//! | D1             | `u32`                      |
//! | n_covariates   | `u32`                      |
//! | bag_count      | `u32`                      |
//!
//! then per bag: `u16` id length + UTF-8 slide id, `u16` length + UTF-8
//! patient id, `u8` label, `u32` tile_count_total, `u32` B, `n_covariates`
//! × `f32` covariates, `u8` group flag followed (if 1) by B group bytes,
//! then B·D1 × `f32` features, row-major.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::milnet::FeatureBag;
use crate::numkit::Tensor2D;

pub const DEFAULT_TILE_SIZE: usize = 224;
pub const DEFAULT_MICRONS_PER_PIXEL: f64 = 0.5;
pub const DEFAULT_MIN_FOREGROUND: f64 = 0.5;
/// Minimum tissue area for a slide to pass QC.
pub const QC_MIN_AREA_CM2: f64 = 0.1;

pub const BAG_MAGIC: &[u8; 4] = b"MILB";
pub const BAG_VERSION: u32 = 1;
pub const BAG_HEADER_LEN: usize = 20;

/// 8-bit grayscale slide raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterSlide {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub microns_per_pixel: f64,
}

impl RasterSlide {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, microns_per_pixel: f64) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} pixels for a {width}x{height} raster",
                pixels.len()
            )));
        }
        if !(microns_per_pixel > 0.0 && microns_per_pixel.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "microns per pixel must be positive, got {microns_per_pixel}"
            )));
        }
        Ok(RasterSlide {
            width,
            height,
            pixels,
            microns_per_pixel,
        })
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &p in &self.pixels {
            h[p as usize] += 1;
        }
        h
    }

    /// Pixels of the `size × size` tile with top-left corner `(x, y)`.
    pub fn tile_pixels(&self, x: usize, y: usize, size: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(size * size);
        for row in y..y + size {
            out.extend_from_slice(&self.pixels[row * self.width + x..row * self.width + x + size]);
        }
        out
    }

    /// Parses a binary portable graymap (`P5`, maxval 255).
    pub fn from_pgm(bytes: &[u8], microns_per_pixel: f64) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Truncated);
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(Error::BadMagic);
        }
        let mut num = |what: &str| -> Result<usize> {
            token()?
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM {what}")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval != 255 {
            return Err(Error::Format(format!("PGM maxval must be 255, got {maxval}")));
        }
        // exactly one whitespace byte separates the header from the payload
        let start = pos + 1;
        let end = start + width * height;
        if end > bytes.len() {
            return Err(Error::Truncated);
        }
        RasterSlide::new(width, height, bytes[start..end].to_vec(), microns_per_pixel)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read_pgm(path: &Path, microns_per_pixel: f64) -> Result<Self> {
        RasterSlide::from_pgm(&std::fs::read(path)?, microns_per_pixel)
    }
}

/// Otsu threshold: the `t` maximising the between-class variance of the
/// split `{v <= t}` / `{v > t}`. Ties resolve to the lowest `t`.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("empty histogram".into()));
    }
    let n = total as f64;
    let sum_all: f64 = histogram.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut best_t = 0u8;
    let mut best_var = -1.0;
    let mut n0 = 0u64;
    let mut s0 = 0.0;
    for t in 0..256usize {
        n0 += histogram[t];
        s0 += t as f64 * histogram[t] as f64;
        let n1 = total - n0;
        let var = if n0 == 0 || n1 == 0 {
            0.0
        } else {
            let w0 = n0 as f64 / n;
            let w1 = n1 as f64 / n;
            let mu0 = s0 / n0 as f64;
            let mu1 = (sum_all - s0) / n1 as f64;
            w0 * w1 * (mu0 - mu1) * (mu0 - mu1)
        };
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

/// Kept tiles of a slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: usize,
    /// Top-left corners `(x, y)`, grid aligned, row-major order.
    pub tiles: Vec<(usize, usize)>,
    /// Pixels at or below this value count as tissue.
    pub threshold: u8,
}

/// Non-overlapping grid tiling; a tile is kept when its tissue fraction is
/// at least `min_foreground_frac`. Tissue is darker than background, so
/// pixels at or below the Otsu threshold are foreground.
pub fn extract_tiles(slide: &RasterSlide, tile_size: usize, min_foreground_frac: f64) -> Result<TileGrid> {
    if tile_size == 0 || tile_size > slide.width.min(slide.height) {
        return Err(Error::InvalidArgument(format!(
            "slide {}x{} is smaller than one {tile_size}px tile",
            slide.width, slide.height
        )));
    }
    if !(0.0..=1.0).contains(&min_foreground_frac) {
        return Err(Error::InvalidArgument(format!(
            "foreground fraction must lie in [0, 1], got {min_foreground_frac}"
        )));
    }
    let threshold = otsu_threshold(&slide.histogram())?;
    let area = (tile_size * tile_size) as f64;
    let mut tiles = Vec::new();
    for ty in 0..slide.height / tile_size {
        for tx in 0..slide.width / tile_size {
            let (x, y) = (tx * tile_size, ty * tile_size);
            let mut fg = 0usize;
            for row in y..y + tile_size {
                fg += slide.pixels[row * slide.width + x..row * slide.width + x + tile_size]
                    .iter()
                    .filter(|&&p| p <= threshold)
                    .count();
            }
            if fg as f64 / area >= min_foreground_frac {
                tiles.push((x, y));
            }
        }
    }
    Ok(TileGrid {
        tile_size,
        tiles,
        threshold,
    })
}

/// Tissue area covered by `tile_count` square tiles, in cm².
pub fn tissue_area_cm2(tile_count: u64, tile_size_px: usize, microns_per_pixel: f64) -> f64 {
    let side_cm = tile_size_px as f64 * microns_per_pixel * 1e-4;
    tile_count as f64 * side_cm * side_cm
}

pub fn passes_qc(tile_count: u64, tile_size_px: usize, microns_per_pixel: f64, min_area_cm2: f64) -> bool {
    tissue_area_cm2(tile_count, tile_size_px, microns_per_pixel) >= min_area_cm2
}

/// Number of handcrafted statistics before padding.
pub const BASE_FEATURES: usize = 20;

/// Handcrafted tile descriptor: 16-bin normalised intensity histogram,
/// mean, variance, mean central-difference gradient magnitude (interior
/// pixels) and tissue fraction, scaled to unit range and repeated
/// cyclically to `target_dim`.
pub fn featurize_tile(pixels: &[u8], side: usize, threshold: u8, target_dim: usize) -> Result<Vec<f64>> {
    if side == 0 || pixels.len() != side * side {
        return Err(Error::Dimension(format!(
            "{} pixels for a {side}x{side} tile",
            pixels.len()
        )));
    }
    if target_dim < 16 {
        return Err(Error::InvalidArgument(format!("feature dimension must be >= 16, got {target_dim}")));
    }
    let n = pixels.len() as f64;
    let mut base = [0.0; BASE_FEATURES];
    for &p in pixels {
        base[(p / 16) as usize] += 1.0;
    }
    for b in &mut base[..16] {
        *b /= n;
    }
    let mean = pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
    let var = pixels.iter().map(|&p| (p as f64 - mean).powi(2)).sum::<f64>() / n;
    let mut grad = 0.0;
    let mut interior = 0usize;
    if side >= 3 {
        for y in 1..side - 1 {
            for x in 1..side - 1 {
                let at = |xx: usize, yy: usize| pixels[yy * side + xx] as f64;
                let gx = (at(x + 1, y) - at(x - 1, y)) / 2.0;
                let gy = (at(x, y + 1) - at(x, y - 1)) / 2.0;
                grad += (gx * gx + gy * gy).sqrt();
                interior += 1;
            }
        }
    }
    let grad = if interior > 0 { grad / interior as f64 } else { 0.0 };
    let fg = pixels.iter().filter(|&&p| p <= threshold).count() as f64 / n;
    base[16] = mean / 255.0;
    base[17] = var / (255.0 * 255.0);
    base[18] = grad / 255.0;
    base[19] = fg;
    Ok((0..target_dim).map(|i| base[i % BASE_FEATURES]).collect())
}

/// Tiles and featurises one slide into a bag.
pub fn slide_to_bag(
    slide: &RasterSlide,
    slide_id: &str,
    patient_id: &str,
    label: u8,
    tile_size: usize,
    min_foreground_frac: f64,
    d1: usize,
) -> Result<FeatureBag> {
    let grid = extract_tiles(slide, tile_size, min_foreground_frac)?;
    if grid.tiles.is_empty() {
        return Err(Error::EmptyBag);
    }
    let mut data = Vec::with_capacity(grid.tiles.len() * d1);
    for &(x, y) in &grid.tiles {
        let f = featurize_tile(&slide.tile_pixels(x, y, tile_size), tile_size, grid.threshold, d1)?;
        // stored as f32 on disk; keep the in-memory copy identical
        data.extend(f.into_iter().map(|v| v as f32 as f64));
    }
    Ok(FeatureBag {
        slide_id: slide_id.to_string(),
        patient_id: patient_id.to_string(),
        label,
        features: Tensor2D::from_vec(grid.tiles.len(), d1, data)?,
        covariates: Vec::new(),
        tile_groups: None,
        tile_count_total: grid.tiles.len() as u32,
    })
}

fn put_str(out: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::InvalidArgument(format!("{what} longer than 65535 bytes")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serialises bags into the `MILB` format.
pub fn encode_bags(bags: &[FeatureBag], d1: usize, n_covariates: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(BAG_HEADER_LEN);
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.extend_from_slice(&(d1 as u32).to_le_bytes());
    out.extend_from_slice(&(n_covariates as u32).to_le_bytes());
    out.extend_from_slice(&(bags.len() as u32).to_le_bytes());
    for bag in bags {
        bag.validate()?;
        if bag.d1() != d1 {
            return Err(Error::Dimension(format!(
                "bag {} has D1={} in a D1={d1} dataset",
                bag.slide_id,
                bag.d1()
            )));
        }
        if bag.covariates.len() != n_covariates {
            return Err(Error::Dimension(format!(
                "bag {} has {} covariates, dataset declares {n_covariates}",
                bag.slide_id,
                bag.covariates.len()
            )));
        }
        put_str(&mut out, &bag.slide_id, "slide id")?;
        put_str(&mut out, &bag.patient_id, "patient id")?;
        out.push(bag.label);
        out.extend_from_slice(&bag.tile_count_total.to_le_bytes());
        out.extend_from_slice(&(bag.n_tiles() as u32).to_le_bytes());
        for &c in &bag.covariates {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        match &bag.tile_groups {
            Some(g) => {
                out.push(1);
                out.extend_from_slice(g);
            }
            None => out.push(0),
        }
        for &v in bag.features.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Dataset header fields plus bags.
#[derive(Debug, Clone, PartialEq)]
pub struct BagDataset {
    pub d1: usize,
    pub n_covariates: usize,
    pub bags: Vec<FeatureBag>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32(&mut self) -> Result<f64> {
        let v = f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::Format("non-finite value in bag file".into()));
        }
        Ok(v as f64)
    }
    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 id".into()))
    }
}

pub fn decode_bags(bytes: &[u8]) -> Result<BagDataset> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < 4 {
        return Err(Error::Truncated);
    }
    if c.take(4)? != BAG_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = c.u32()?;
    if version != BAG_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let d1 = c.u32()? as usize;
    let n_cov = c.u32()? as usize;
    let count = c.u32()? as usize;
    let mut bags = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let slide_id = c.string()?;
        let patient_id = c.string()?;
        let label = c.u8()?;
        if label > 1 {
            return Err(Error::Format(format!("slide {slide_id}: label {label}")));
        }
        let tile_count_total = c.u32()?;
        let b = c.u32()? as usize;
        if b == 0 {
            return Err(Error::Format(format!("slide {slide_id}: empty bag")));
        }
        let covariates = (0..n_cov).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
        let tile_groups = match c.u8()? {
            0 => None,
            1 => Some(c.take(b)?.to_vec()),
            f => return Err(Error::Format(format!("bad group flag {f}"))),
        };
        let n = b.checked_mul(d1).ok_or(Error::Truncated)?;
        if c.pos + n * 4 > bytes.len() {
            return Err(Error::Truncated);
        }
        let data = (0..n).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
        bags.push(FeatureBag {
            slide_id,
            patient_id,
            label,
            features: Tensor2D::from_vec(b, d1, data)?,
            covariates,
            tile_groups,
            tile_count_total,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(BagDataset {
        d1,
        n_covariates: n_cov,
        bags,
    })
}

pub fn write_bags(path: &Path, bags: &[FeatureBag], d1: usize, n_covariates: usize) -> Result<()> {
    let bytes = encode_bags(bags, d1, n_covariates)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_bags(path: &Path) -> Result<BagDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_bags(&bytes)
}
