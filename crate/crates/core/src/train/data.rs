//! Dataset discovery, splitting, decoding and normalisation.
//!
//! Layout: `root/images/*.{png,ppm}` (8-bit RGB) and
//! `root/masks/*.{png,pgm}` (8-bit grey) with matching file stems.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const IMAGE_EXTS: [&str; 2] = ["png", "ppm"];
pub const MASK_EXTS: [&str; 2] = ["png", "pgm"];
/// Mask bytes above this value are foreground.
pub const MASK_THRESHOLD: u8 = 127;
/// Default fraction of pairs used for training.
pub const TRAIN_RATIO: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train|val|test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Image/mask pairs and their split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub pairs: Vec<Pair>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetIndex {
    pub fn split(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn list_by_stem(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| exts.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Dataset(format!(
                "two files share the stem {stem}: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Pairs images with masks and splits them `ratio : (1 − ratio)`, the
/// held-out part divided evenly between validation and test (validation
/// gets the odd one). The shuffle is seeded.
pub fn index_dataset(root: &Path, ratio: f64, seed: u64) -> Result<DatasetIndex> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio must lie in [0, 1], got {ratio}")));
    }
    let images = list_by_stem(&root.join("images"), &IMAGE_EXTS)?;
    let masks = list_by_stem(&root.join("masks"), &MASK_EXTS)?;
    let lonely: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .map(|k| format!("image {k} has no mask"))
        .chain(masks.keys().filter(|k| !images.contains_key(*k)).map(|k| format!("mask {k} has no image")))
        .collect();
    if !lonely.is_empty() {
        return Err(Error::Dataset(format!("unmatched stems: {}", lonely.join(", "))));
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no image/mask pairs under {}", root.display())));
    }
    let pairs: Vec<Pair> = images
        .into_iter()
        .map(|(stem, image)| Pair {
            mask: masks[&stem].clone(),
            stem,
            image,
        })
        .collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (pairs.len() as f64 * ratio).round() as usize;
    let held = pairs.len() - n_train;
    let n_val = held.div_ceil(2);
    Ok(DatasetIndex {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
        pairs,
    })
}

/// A decoded image (`3×H×W`) with its binary mask (`1×H×W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub stem: String,
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", path.display())))
}

/// RGB image scaled to `[0, 1]`, resized to `size×size`.
pub fn read_image<T: Float>(path: &Path, size: Option<usize>) -> Result<Tensor<T>> {
    let mut img = open(path)?.to_rgb8();
    if let Some(s) = size {
        if img.dimensions() != (s as u32, s as u32) {
            img = image::imageops::resize(&img, s as u32, s as u32, FilterType::Triangle);
        }
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = T::of(p[c] as f64 / 255.0);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Binary mask (`byte > 127` is foreground), nearest-neighbour resized.
pub fn read_mask<T: Float>(path: &Path, size: Option<usize>) -> Result<Tensor<T>> {
    let mut m = open(path)?.to_luma8();
    if let Some(s) = size {
        if m.dimensions() != (s as u32, s as u32) {
            m = image::imageops::resize(&m, s as u32, s as u32, FilterType::Nearest);
        }
    }
    let (w, h) = (m.width() as usize, m.height() as usize);
    let data = m.pixels().map(|p| binarize(p[0])).map(T::of).collect();
    Tensor::new(&[1, h, w], data)
}

pub fn binarize(byte: u8) -> f64 {
    if byte > MASK_THRESHOLD {
        1.0
    } else {
        0.0
    }
}

/// Per-channel normalisation constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Mean and population standard deviation of each channel over all
    /// pixels of `samples`. A constant channel gets standard deviation 1.
    pub fn fit<T: Float>(samples: &[Sample<T>]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Dataset("cannot fit normalisation on an empty split".into()));
        };
        let c = first.image.shape()[0];
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for s in samples {
            let (sc, h, w) = s.image.dims3()?;
            if sc != c {
                return Err(Error::Dataset(format!("{}: {sc} channels, expected {c}", s.stem)));
            }
            for (ch, plane) in s.image.data().chunks(h * w).enumerate() {
                for &v in plane {
                    sum[ch] += v.f64();
                    sq[ch] += v.f64() * v.f64();
                }
            }
            count += h * w;
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply<T: Float>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = image.dims3()?;
        if c != self.mean.len() {
            return Err(Error::Dataset(format!(
                "image has {c} channels, normalisation has {}",
                self.mean.len()
            )));
        }
        let mut data = image.data().to_vec();
        for (ch, plane) in data.chunks_mut(h * w).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in plane {
                *v = T::of((v.f64() - m) / s);
            }
        }
        Tensor::new(image.shape(), data)
    }

    pub fn apply_all<T: Float>(&self, samples: &mut [Sample<T>]) -> Result<()> {
        for s in samples {
            s.image = self.apply(&s.image)?;
        }
        Ok(())
    }
}

/// Decoded, normalised splits.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
    pub norm: Normalization,
}

impl<T: Float> Dataset<T> {
    pub fn split(&self, s: Split) -> &[Sample<T>] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn read_pair<T: Float>(p: &Pair, size: usize) -> Result<Sample<T>> {
    Ok(Sample {
        stem: p.stem.clone(),
        image: read_image(&p.image, Some(size))?,
        mask: read_mask(&p.mask, Some(size))?,
    })
}

/// Indexes, decodes and normalises `root` with statistics from the training
/// split.
pub fn load_dataset<T: Float>(root: &Path, ratio: f64, seed: u64, size: usize) -> Result<Dataset<T>> {
    load_dataset_with(root, ratio, seed, size, None)
}

/// As [`load_dataset`], but normalises with `norm` when given instead of
/// fitting on the training split.
pub fn load_dataset_with<T: Float>(
    root: &Path,
    ratio: f64,
    seed: u64,
    size: usize,
    norm: Option<&Normalization>,
) -> Result<Dataset<T>> {
    let index = index_dataset(root, ratio, seed)?;
    let read = |ids: &[usize]| -> Result<Vec<Sample<T>>> { ids.iter().map(|&i| read_pair(&index.pairs[i], size)).collect() };
    let mut train = read(&index.train)?;
    let mut val = read(&index.val)?;
    let mut test = read(&index.test)?;
    let norm = match norm {
        Some(n) => n.clone(),
        None => Normalization::fit(if train.is_empty() { &val } else { &train })?,
    };
    for split in [&mut train, &mut val, &mut test] {
        norm.apply_all(split)?;
    }
    Ok(Dataset { train, val, test, norm })
}

// ---------------------------------------------------------------------------
// Synthetic data

/// One random filled ellipse on a noisy background, as 8-bit RGB and mask
/// buffers (row-major, `size×size`).
pub fn ellipse_bytes(size: usize, rng: &mut impl Rng) -> (Vec<u8>, Vec<u8>) {
    let s = size as f64;
    let cy = rng.random_range(0.3..0.7) * s;
    let cx = rng.random_range(0.3..0.7) * s;
    let ry = rng.random_range(0.12..0.3) * s;
    let rx = rng.random_range(0.12..0.3) * s;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    let fg: [f64; 3] = [rng.random_range(150.0..230.0), rng.random_range(60.0..120.0), rng.random_range(40.0..90.0)];
    let bg: [f64; 3] = [rng.random_range(170.0..220.0), rng.random_range(140.0..190.0), rng.random_range(120.0..170.0)];
    let mut rgb = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let u = (dx * cos + dy * sin) / rx;
            let v = (-dx * sin + dy * cos) / ry;
            let inside = u * u + v * v <= 1.0;
            mask.push(if inside { 255 } else { 0 });
            let base = if inside { fg } else { bg };
            for b in base {
                let noise: f64 = rng.random_range(-12.0..12.0);
                rgb.push((b + noise).clamp(0.0, 255.0) as u8);
            }
        }
    }
    (rgb, mask)
}

/// `n` synthetic ellipse samples with pixel values in `[0, 1]`.
pub fn synthetic_ellipses<T: Float>(n: usize, size: usize, seed: u64) -> Result<Vec<Sample<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (rgb, mask) = ellipse_bytes(size, &mut rng);
            let mut img = vec![T::zero(); 3 * size * size];
            for (p, px) in rgb.chunks(3).enumerate() {
                for c in 0..3 {
                    img[c * size * size + p] = T::of(px[c] as f64 / 255.0);
                }
            }
            Ok(Sample {
                stem: format!("ellipse_{i:03}"),
                image: Tensor::new(&[3, size, size], img)?,
                mask: Tensor::new(&[1, size, size], mask.iter().map(|&b| T::of(binarize(b))).collect())?,
            })
        })
        .collect()
}

/// Writes `n` synthetic pairs as `images/*.png` and `masks/*.png` under
/// `root`.
pub fn write_synthetic_dataset(root: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for dir in ["images", "masks"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for i in 0..n {
        let (rgb, mask) = ellipse_bytes(size, &mut rng);
        let stem = format!("ellipse_{i:03}");
        let ip = root.join("images").join(format!("{stem}.png"));
        let mp = root.join("masks").join(format!("{stem}.png"));
        let s = size as u32;
        image::RgbImage::from_raw(s, s, rgb)
            .expect("buffer sized for the image")
            .save(&ip)
            .map_err(|e| Error::Dataset(format!("cannot write {}: {e}", ip.display())))?;
        image::GrayImage::from_raw(s, s, mask)
            .expect("buffer sized for the mask")
            .save(&mp)
            .map_err(|e| Error::Dataset(format!("cannot write {}: {e}", mp.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_contract() {
        assert_eq!(binarize(128), 1.0);
        assert_eq!(binarize(127), 0.0);
        assert_eq!(binarize(0), 0.0);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 10, 32, 1).unwrap();
        let a = index_dataset(dir.path(), 0.7, 3).unwrap();
        assert_eq!(a.train.len(), 7);
        assert_eq!(a.val.len() + a.test.len(), 3);
        assert_eq!(a, index_dataset(dir.path(), 0.7, 3).unwrap());
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn unmatched_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 3, 32, 1).unwrap();
        std::fs::remove_file(dir.path().join("masks/ellipse_001.png")).unwrap();
        let err = index_dataset(dir.path(), 0.7, 0).unwrap_err();
        assert!(matches!(&err, Error::Dataset(m) if m.contains("ellipse_001")), "{err}");
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(index_dataset(empty.path(), 0.7, 0), Err(Error::Io { .. })));
    }

    #[test]
    fn loads_and_normalises() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 6, 32, 2).unwrap();
        let ds = load_dataset::<f64>(dir.path(), 0.5, 0, 64).unwrap();
        assert_eq!(ds.train.len(), 3);
        assert_eq!(ds.train[0].image.shape(), &[3, 64, 64]);
        assert!(ds.train[0].mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let refit = Normalization::fit(&ds.train).unwrap();
        for (m, s) in refit.mean.iter().zip(&refit.std) {
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn synthetic_in_memory_matches_files() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 2, 32, 9).unwrap();
        let mem = synthetic_ellipses::<f32>(2, 32, 9).unwrap();
        let idx = index_dataset(dir.path(), 1.0, 0).unwrap();
        for p in &idx.pairs {
            let s = read_pair::<f32>(p, 32).unwrap();
            let m = mem.iter().find(|m| m.stem == s.stem).unwrap();
            assert_eq!(s.image, m.image);
            assert_eq!(s.mask, m.mask);
        }
    }
}
