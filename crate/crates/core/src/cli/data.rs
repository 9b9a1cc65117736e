use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::{normalize, read_pgm, resize, write_pgm, GrayImage};
use crate::train::Dataset;

/// Class names in label order.
pub const CLASS_NAMES: [&str; 4] = ["MildDemented", "ModerateDemented", "NonDemented", "VeryMildDemented"];

/// Files of a class-per-directory image tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// `files[label]` lists that class's images, sorted by file name.
    pub files: Vec<Vec<PathBuf>>,
}

impl DatasetManifest {
    pub fn counts(&self) -> Vec<usize> {
        self.files.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.files.iter().map(Vec::len).sum()
    }

    /// `(label, path)` in label order, then file order.
    pub fn samples(&self) -> impl Iterator<Item = (usize, &PathBuf)> {
        self.files.iter().enumerate().flat_map(|(label, files)| files.iter().map(move |p| (label, p)))
    }

    /// Path relative to the root, for split listings.
    pub fn relative<'a>(&self, path: &'a Path) -> &'a Path {
        path.strip_prefix(&self.root).unwrap_or(path)
    }
}

fn is_image(path: &Path) -> bool {
    path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
}

/// List every class directory. Each listed image is parsed once so a broken
/// file is reported here rather than halfway through a run.
pub fn ingest(root: &Path) -> Result<DatasetManifest> {
    let mut files = Vec::with_capacity(CLASS_NAMES.len());
    for name in CLASS_NAMES {
        let dir = root.join(name);
        if !dir.is_dir() {
            return Err(Error::MissingClassDir(dir));
        }
        let mut list = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if is_image(&path) {
                list.push(path);
            }
        }
        list.sort();
        for path in &list {
            read_pgm(path)?;
        }
        files.push(list);
    }
    Ok(DatasetManifest { root: root.to_path_buf(), files })
}

/// Resize to `size` and scale to `[0, 1]`.
pub fn prepare_image(img: &GrayImage, size: usize) -> Result<Vec<f32>> {
    Ok(normalize(&resize(img, size)?).values().to_vec())
}

pub fn load_dataset(manifest: &DatasetManifest, size: usize) -> Result<Dataset> {
    let mut data = Dataset::new(size, CLASS_NAMES.len());
    for (label, path) in manifest.samples() {
        data.push(prepare_image(&read_pgm(path)?, size)?, label)?;
    }
    Ok(data)
}

/// One synthetic scan: a class-dependent background level, `label + 1`
/// bright disks at random places, and uniform noise.
pub fn synthetic_image(label: usize, size: usize, rng: &mut impl Rng) -> Result<GrayImage> {
    let base = 50.0 + 25.0 * label as f64 + rng.gen_range(-10.0..10.0);
    let radius = (size as f64 / 10.0).max(1.5);
    let blobs: Vec<(f64, f64, f64)> = (0..=label)
        .map(|_| {
            let y = rng.gen_range(radius..size as f64 - radius);
            let x = rng.gen_range(radius..size as f64 - radius);
            (y, x, rng.gen_range(200.0..240.0))
        })
        .collect();
    let mut pixels = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (py, px) = (i as f64 + 0.5, j as f64 + 0.5);
            let mut v = base;
            for &(y, x, level) in &blobs {
                if (py - y).powi(2) + (px - x).powi(2) <= radius * radius {
                    v = v.max(level);
                }
            }
            v += rng.gen_range(-12.0..12.0);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(size, size, pixels)
}

/// Write `per_class` images per class under `out/<class>/`.
pub fn gen_synthetic(out: &Path, per_class: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    if per_class == 0 || size < 4 {
        return Err(Error::InvalidArgument(format!("need per_class >= 1 and size >= 4, got {per_class} and {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut files = Vec::with_capacity(CLASS_NAMES.len());
    for (label, name) in CLASS_NAMES.iter().enumerate() {
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        let mut list = Vec::with_capacity(per_class);
        for i in 0..per_class {
            let path = dir.join(format!("{name}_{i:04}.pgm"));
            write_pgm(&path, &synthetic_image(label, size, &mut rng)?)?;
            list.push(path);
        }
        files.push(list);
    }
    Ok(DatasetManifest { root: out.to_path_buf(), files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_classes_differ_in_brightness() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let means: Vec<f64> = (0..4)
            .map(|k| {
                let img = synthetic_image(k, 32, &mut rng).unwrap();
                img.pixels().iter().map(|&p| p as f64).sum::<f64>() / img.pixels().len() as f64
            })
            .collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    }
}
