//! Datasets: seeded synthetic template images and IDX (MNIST-format) files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Images stored as `n x side x side x channels` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub side: usize,
    pub channels: usize,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        side: usize,
        channels: usize,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = side * side * channels;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Format(format!(
                "{} image values for {} labels of {side}x{side}x{channels}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Dataset {
            images,
            labels,
            side,
            channels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    /// Gathers `idx` into a batch tensor. With `flip_rng`, each image is
    /// mirrored horizontally with probability 1/2.
    pub fn batch<S: Scalar>(
        &self,
        idx: &[usize],
        aug: &Augment,
        flip_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<S>, Vec<usize>)> {
        let (side, c) = (self.side, self.channels);
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        let mut labels = Vec::with_capacity(idx.len());
        let mut flips = flip_rng;
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Config(format!("sample {i} out of range")));
            }
            let img = self.image(i);
            let flip = aug.flip && flips.as_mut().is_some_and(|r| r.random_bool(0.5));
            let start = data.len();
            for y in 0..side {
                for x in 0..side {
                    let sx = if flip { side - 1 - x } else { x };
                    let px = (y * side + sx) * c;
                    data.extend(img[px..px + c].iter().map(|&v| S::of(v as f64)));
                }
            }
            if aug.normalize {
                standardize(&mut data[start..]);
            }
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[idx.len(), side, side, c], data)?, labels))
    }
}

/// Per-image zero mean, unit variance.
fn standardize<S: Scalar>(img: &mut [S]) {
    let n = img.len() as f64;
    let mean = img.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = img.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    for v in img {
        *v = S::of((v.as_f64() - mean) * inv);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    pub flip: bool,
    pub normalize: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            flip: true,
            normalize: true,
        }
    }
}

/// Sample indices for one epoch, shuffled by `(seed, epoch)` and split into
/// batches; the last batch may be short.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, 0));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Deterministic generator for a `(seed, epoch)` pair; `lane` separates
/// independent uses within an epoch.
pub fn epoch_rng(seed: u64, epoch: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(8).wrapping_add(lane));
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub sigma: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Side of the random grid that is upsampled into each template.
    pub template_grid: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            image_size: 32,
            channels: 3,
            sigma: 0.3,
            train_per_class: 500,
            val_per_class: 100,
            template_grid: 4,
            seed: 0,
        }
    }
}

/// Smooth random class templates: a `grid x grid` random field bilinearly
/// upsampled to the image size.
pub fn class_templates(spec: &SyntheticSpec) -> Result<Vec<Vec<f32>>> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if spec.template_grid < 2 || spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::Config(
            "template_grid must be >= 2 and image geometry positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (g, side, c) = (spec.template_grid, spec.image_size, spec.channels);
    let mut templates = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let field: Vec<f64> = (0..g * g * c).map(|_| rng.random::<f64>()).collect();
        let mut img = Vec::with_capacity(side * side * c);
        let pos = |i: usize| {
            let t = if side > 1 {
                i as f64 * (g - 1) as f64 / (side - 1) as f64
            } else {
                0.0
            };
            let lo = (t.floor() as usize).min(g - 2);
            (lo, t - lo as f64)
        };
        for y in 0..side {
            let (y0, fy) = pos(y);
            for x in 0..side {
                let (x0, fx) = pos(x);
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| field[(yy * g + xx) * c + ch];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                    let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                    img.push((top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
        templates.push(img);
    }
    Ok(templates)
}

/// Train and validation splits drawn from the same templates with
/// independent noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let templates = class_templates(spec)?;
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise sigma {} must be non-negative",
            spec.sigma
        )));
    }
    let split = |per_class: usize, stream: u64, tag: Split| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let noise = Normal::new(0.0, spec.sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let mut images = Vec::with_capacity(per_class * spec.classes * templates[0].len());
        let mut labels = Vec::with_capacity(per_class * spec.classes);
        for i in 0..per_class * spec.classes {
            let label = i % spec.classes;
            for &v in &templates[label] {
                let n = if spec.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                images.push((v as f64 + n).clamp(0.0, 1.0) as f32);
            }
            labels.push(label);
        }
        Dataset::new(images, labels, spec.image_size, spec.channels, spec.classes, tag)
    };
    Ok((
        split(spec.train_per_class, 1, Split::Train)?,
        split(spec.val_per_class, 2, Split::Val)?,
    ))
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]` and resizing
/// each image to `image_size` by nearest neighbour.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    image_size: usize,
    classes: usize,
    split: Split,
) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    let magic = read_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic {magic:#010x}",
            images_path.display()
        )));
    }
    let magic = read_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic {magic:#010x}",
            labels_path.display()
        )));
    }
    let n = read_u32(&img, 4, images_path)? as usize;
    let rows = read_u32(&img, 8, images_path)? as usize;
    let cols = read_u32(&img, 12, images_path)? as usize;
    let n_labels = read_u32(&lab, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::Format(format!(
            "image/label count mismatch: {n} images, {n_labels} labels"
        )));
    }
    let pixels = &img[16..];
    if pixels.len() < n * rows * cols {
        return Err(Error::Format(format!(
            "{}: truncated pixel data",
            images_path.display()
        )));
    }
    let labels = &lab[8..];
    if labels.len() < n {
        return Err(Error::Format(format!(
            "{}: truncated label data",
            labels_path.display()
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format("IDX images have zero size".into()));
    }
    let mut images = Vec::with_capacity(n * image_size * image_size);
    for i in 0..n {
        let src = &pixels[i * rows * cols..(i + 1) * rows * cols];
        for y in 0..image_size {
            let sy = y * rows / image_size;
            for x in 0..image_size {
                let sx = x * cols / image_size;
                images.push(src[sy * cols + sx] as f32 / 255.0);
            }
        }
    }
    let labels = labels[..n].iter().map(|&l| l as usize).collect();
    Dataset::new(images, labels, image_size, 1, classes, split)
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per = rows * cols;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(Error::Format("pixel buffer is not a whole number of images".into()));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, (pixels.len() / per) as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(fs::write(path, out)?)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    Ok(fs::write(path, out)?)
}

/// Where a run's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

impl DataSource {
    pub fn load(&self, image_size: usize, classes: usize) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic(spec) => generate_synthetic(spec),
            DataSource::Idx {
                train_images,
                train_labels,
                val_images,
                val_labels,
            } => Ok((
                load_idx(train_images, train_labels, image_size, classes, Split::Train)?,
                load_idx(val_images, val_labels, image_size, classes, Split::Val)?,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            image_size: 8,
            channels: 2,
            sigma: 0.0,
            train_per_class: 4,
            val_per_class: 2,
            template_grid: 3,
            seed: 11,
        }
    }

    #[test]
    fn noiseless_samples_equal_templates() {
        let spec = small();
        let templates = class_templates(&spec).unwrap();
        let (train, val) = generate_synthetic(&spec).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(val.len(), 6);
        for i in 0..train.len() {
            assert_eq!(train.image(i), &templates[train.labels[i]][..]);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec { sigma: 0.3, ..small() };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec {
            seed: 12,
            ..spec.clone()
        };
        assert_ne!(
            generate_synthetic(&spec).unwrap().0,
            generate_synthetic(&other).unwrap().0
        );
        assert!(generate_synthetic(&SyntheticSpec { classes: 1, ..spec }).is_err());
    }

    #[test]
    fn batches_partition_each_epoch() {
        let b = batch_iter(10, 3, 7, 3).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b[3].len(), 1);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batch_iter(10, 3, 7, 3).unwrap());
        assert_ne!(b.concat(), batch_iter(10, 3, 7, 4).unwrap().concat());
        assert_eq!(batch_iter(5, 9, 1, 0).unwrap().len(), 1);
        assert!(batch_iter(5, 0, 1, 0).is_err());
    }

    #[test]
    fn flip_mirrors_columns() {
        let ds = Dataset::new(vec![0.0, 1.0, 2.0, 3.0], vec![0], 2, 1, 2, Split::Train).unwrap();
        let aug = Augment {
            flip: true,
            normalize: false,
        };
        let plain = Augment {
            flip: false,
            normalize: false,
        };
        let (x, _) = ds.batch::<f32>(&[0], &plain, None).unwrap();
        assert_eq!(x.data(), &[0.0, 1.0, 2.0, 3.0]);
        let mut rng = epoch_rng(0, 0, 1);
        let mut seen_flip = false;
        for _ in 0..16 {
            let (x, _) = ds.batch::<f32>(&[0], &aug, Some(&mut rng)).unwrap();
            seen_flip |= x.data() == [1.0, 0.0, 3.0, 2.0];
        }
        assert!(seen_flip);
        let (x, _) = ds
            .batch::<f64>(
                &[0],
                &Augment {
                    flip: false,
                    normalize: true,
                },
                None,
            )
            .unwrap();
        let mean: f64 = x.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
