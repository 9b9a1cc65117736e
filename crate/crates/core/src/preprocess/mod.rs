//! Image preprocessing: histogram equalization, median filtering,
//! nearest-neighbour resizing and [0, 1] normalization.

mod pgm;

pub use pgm::{read_pgm, read_pgm_bytes, write_pgm, write_pgm_bytes};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of representable intensity levels.
pub const LEVELS: usize = 256;
pub const DEFAULT_TARGET: usize = 224;
pub const DEFAULT_WINDOW: usize = 3;

/// Single-channel 8-bit image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ZeroDim(vec![height, width]));
        }
        if pixels.len() != height * width {
            return Err(Error::DimMismatch(format!("{height}x{width} image with {} pixels", pixels.len())));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Average interleaved channels down to one.
    pub fn from_interleaved(height: usize, width: usize, channels: usize, data: &[u8]) -> Result<Self> {
        if channels == 0 || data.len() != height * width * channels {
            return Err(Error::DimMismatch(format!("{height}x{width}x{channels} from {} bytes", data.len())));
        }
        let pixels = data
            .chunks(channels)
            .map(|px| {
                let sum: u32 = px.iter().map(|&v| v as u32).sum();
                ((sum + channels as u32 / 2) / channels as u32) as u8
            })
            .collect();
        Self::new(height, width, pixels)
    }
}

/// Image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedImage {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl NormalizedImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// As a `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.values.clone()).expect("valid dims")
    }
}

/// Remap intensities through the cumulative histogram:
/// `round((cdf(p) - cdf_min) / (cdf_max - cdf_min) * 255)`, where `cdf_min` is
/// the CDF at the darkest intensity present. A constant image is returned as is.
pub fn histogram_equalize(img: &GrayImage) -> GrayImage {
    let mut hist = [0usize; LEVELS];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let total = img.pixels.len() as f64;
    let mut cdf = [0.0f64; LEVELS];
    let mut running = 0usize;
    for (level, &count) in hist.iter().enumerate() {
        running += count;
        cdf[level] = running as f64 / total;
    }
    let darkest = hist.iter().position(|&c| c > 0).expect("non-empty image");
    let (cdf_min, cdf_max) = (cdf[darkest], cdf[LEVELS - 1]);
    if cdf_max == cdf_min {
        return img.clone();
    }
    let mut lut = [0u8; LEVELS];
    for level in darkest..LEVELS {
        let v = ((cdf[level] - cdf_min) / (cdf_max - cdf_min) * (LEVELS - 1) as f64).round();
        lut[level] = v.clamp(0.0, 255.0) as u8;
    }
    GrayImage { height: img.height, width: img.width, pixels: img.pixels.iter().map(|&p| lut[p as usize]).collect() }
}

/// Median of each `window x window` neighbourhood, replicating border pixels.
pub fn median_filter(img: &GrayImage, window: usize) -> Result<GrayImage> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::EvenWindow(window));
    }
    let r = (window / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut out = Vec::with_capacity(img.pixels.len());
    let mut hood = Vec::with_capacity(window * window);
    for y in 0..h {
        for x in 0..w {
            hood.clear();
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w - 1) as usize;
                    hood.push(img.pixels[yy * img.width + xx]);
                }
            }
            let mid = hood.len() / 2;
            out.push(*hood.select_nth_unstable(mid).1);
        }
    }
    GrayImage::new(img.height, img.width, out)
}

/// Nearest-neighbour resize to `target x target`. Each output pixel `(i, j)`
/// reads source `(floor(i / s_h), floor(j / s_w))` with `s = target / extent`.
pub fn resize(img: &GrayImage, target: usize) -> Result<GrayImage> {
    if target == 0 {
        return Err(Error::ZeroDim(vec![target, target]));
    }
    // floor(i / (t / h)) == floor(i * h / t), computed exactly in integers
    let rows: Vec<usize> = (0..target).map(|i| i * img.height / target).collect();
    let cols: Vec<usize> = (0..target).map(|j| j * img.width / target).collect();
    let mut out = Vec::with_capacity(target * target);
    for &sy in &rows {
        let line = &img.pixels[sy * img.width..(sy + 1) * img.width];
        out.extend(cols.iter().map(|&sx| line[sx]));
    }
    GrayImage::new(target, target, out)
}

/// `pixel / 255`.
pub fn normalize(img: &GrayImage) -> NormalizedImage {
    NormalizedImage {
        height: img.height,
        width: img.width,
        values: img.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    }
}

/// Every intermediate of the pipeline, in order.
#[derive(Clone, Debug)]
pub struct Stages {
    pub equalized: GrayImage,
    pub filtered: GrayImage,
    pub resized: GrayImage,
    pub normalized: NormalizedImage,
}

pub fn preprocess_stages(img: &GrayImage, target: usize, window: usize) -> Result<Stages> {
    let equalized = histogram_equalize(img);
    let filtered = median_filter(&equalized, window)?;
    let resized = resize(&filtered, target)?;
    let normalized = normalize(&resized);
    Ok(Stages { equalized, filtered, resized, normalized })
}

/// equalize, then median filter, then resize, then normalize.
pub fn preprocess_pipeline(img: &GrayImage, target: usize, window: usize) -> Result<NormalizedImage> {
    Ok(preprocess_stages(img, target, window)?.normalized)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_survives_equalization() {
        let img = GrayImage::filled(3, 4, 100).unwrap();
        assert_eq!(histogram_equalize(&img), img);
    }

    #[test]
    fn two_level_equalization() {
        let img = GrayImage::new(2, 2, vec![10, 10, 20, 20]).unwrap();
        assert_eq!(histogram_equalize(&img).pixels(), &[0, 0, 255, 255]);
    }

    #[test]
    fn median_window_one_is_identity() {
        let img = GrayImage::new(2, 3, vec![1, 9, 3, 200, 5, 0]).unwrap();
        assert_eq!(median_filter(&img, 1).unwrap(), img);
    }

    #[test]
    fn median_removes_single_spike() {
        let mut px = vec![0u8; 9];
        px[4] = 255;
        let img = GrayImage::new(3, 3, px).unwrap();
        assert_eq!(median_filter(&img, 3).unwrap().pixels(), &[0; 9]);
    }

    #[test]
    fn median_rejects_even_window() {
        let img = GrayImage::filled(3, 3, 1).unwrap();
        assert!(matches!(median_filter(&img, 2), Err(Error::EvenWindow(2))));
        assert!(matches!(median_filter(&img, 0), Err(Error::EvenWindow(0))));
        assert_eq!(median_filter(&img, 5).unwrap(), img);
    }

    #[test]
    fn resize_cases() {
        let img = GrayImage::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(resize(&img, 2).unwrap(), img);
        let checker: Vec<u8> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 255 } else { 0 }).collect();
        let checker = GrayImage::new(4, 4, checker).unwrap();
        let small = resize(&checker, 2).unwrap();
        let expect = [checker.get(0, 0), checker.get(0, 2), checker.get(2, 0), checker.get(2, 2)];
        assert_eq!(small.pixels(), &expect);
        let up = resize(&GrayImage::filled(3, 5, 42).unwrap(), 7).unwrap();
        assert!(up.pixels().iter().all(|&p| p == 42));
    }

    #[test]
    fn normalize_values() {
        let img = GrayImage::new(1, 3, vec![255, 0, 128]).unwrap();
        let n = normalize(&img);
        assert_eq!(n.values(), &[1.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn pipeline_examples() {
        let c = GrayImage::filled(5, 5, 77).unwrap();
        let out = preprocess_pipeline(&c, 8, 3).unwrap();
        assert!(out.values().iter().all(|&v| v == 77.0 / 255.0));
        let img = GrayImage::new(2, 2, vec![10, 10, 20, 20]).unwrap();
        assert_eq!(preprocess_pipeline(&img, 2, 1).unwrap().values(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn channel_averaging() {
        let img = GrayImage::from_interleaved(1, 2, 3, &[0, 30, 60, 255, 255, 254]).unwrap();
        assert_eq!(img.pixels(), &[30, 255]);
    }
}
