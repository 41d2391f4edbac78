//! Datasets: synthetic Gaussian classes, CIFAR binary batches and image
//! folders, plus a bounded-queue batch loader.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GenddError, Result};
use crate::models::InputShape;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// One flattened sample per row (`c x h x w` order for images).
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub shape: InputShape,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize, shape: InputShape) -> Result<Self> {
        ensure!(inputs.nrows() == labels.len(), "{} inputs but {} labels", inputs.nrows(), labels.len());
        ensure!(inputs.ncols() == shape.flat_dim(), "inputs have {} columns, shape needs {}", inputs.ncols(), shape.flat_dim());
        ensure!(labels.iter().all(|&y| y < num_classes), "label out of range for {num_classes} classes");
        Ok(Dataset { name: name.into(), inputs, labels, num_classes, shape })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            shape: self.shape,
        }
    }

    /// First `n` samples (or all of them).
    pub fn truncated(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Norm of each class mean.
    pub separation: f64,
    pub noise_std: f64,
    /// Ratio between the most and least frequent training class; 1 is balanced.
    pub imbalance: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec::smoke()
    }
}

impl SyntheticSpec {
    /// Balanced, linearly separable two-class problem.
    pub fn smoke() -> Self {
        SyntheticSpec {
            num_classes: 2,
            input_dim: 16,
            train_per_class: 256,
            val_per_class: 128,
            separation: 3.0,
            noise_std: 1.0,
            imbalance: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, "synthetic data needs at least two classes");
        ensure!(self.input_dim >= 1, "input_dim must be positive");
        ensure!(self.train_per_class >= 1 && self.val_per_class >= 1, "per-class sample counts must be positive");
        ensure!(self.noise_std >= 0.0 && self.separation >= 0.0, "separation and noise_std must be non-negative");
        ensure!(self.imbalance >= 1.0, "imbalance must be >= 1");
        Ok(())
    }

    /// Training count of class `c` under an exponential long-tail profile.
    pub fn train_count(&self, c: usize) -> usize {
        if self.num_classes < 2 {
            return self.train_per_class;
        }
        let t = c as f64 / (self.num_classes - 1) as f64;
        ((self.train_per_class as f64) * self.imbalance.powf(-t)).round().max(1.0) as usize
    }

    /// `(train, val)` drawn around random class means.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let d = self.input_dim;
        let gauss = |rng: &mut ChaCha8Rng| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            z
        };
        let means: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| self.separation * x / n).collect()
            })
            .collect();
        let draw = |counts: &dyn Fn(usize) -> usize, rng: &mut ChaCha8Rng| {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (c, mean) in means.iter().enumerate() {
                for _ in 0..counts(c) {
                    rows.extend(mean.iter().map(|m| m + self.noise_std * gauss(rng)));
                    labels.push(c);
                }
            }
            // interleave classes so truncation keeps them balanced
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.shuffle(rng);
            let x = Array2::from_shape_vec((labels.len(), d), rows).expect("row count");
            (x.select(Axis(0), &order), order.iter().map(|&i| labels[i]).collect::<Vec<_>>())
        };
        let (xt, yt) = draw(&|c| self.train_count(c), &mut rng);
        let (xv, yv) = draw(&|_| self.val_per_class, &mut rng);
        let shape = InputShape::vector(d);
        Ok((
            Dataset::new("synthetic-train", xt, yt, self.num_classes, shape)?,
            Dataset::new("synthetic-val", xv, yv, self.num_classes, shape)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_RECORD: usize = 3072;

/// Reads the CIFAR-10 (`data_batch_*.bin`, `test_batch.bin`) or CIFAR-100
/// (`train.bin`, `test.bin`, fine labels) binary layout, normalized per channel.
pub fn load_cifar_binary(root: &Path, num_classes: usize, split: Split, limit: Option<usize>) -> Result<Dataset> {
    ensure!(num_classes == 10 || num_classes == 100, "CIFAR variants have 10 or 100 classes, got {num_classes}");
    let (files, label_bytes): (Vec<PathBuf>, usize) = match (num_classes, split) {
        (10, Split::Train) => ((1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(), 1),
        (10, Split::Val) => (vec![root.join("test_batch.bin")], 1),
        (_, Split::Train) => (vec![root.join("train.bin")], 2),
        (_, Split::Val) => (vec![root.join("test.bin")], 2),
    };
    let record = CIFAR_RECORD + label_bytes;
    let cap = limit.unwrap_or(usize::MAX);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        if labels.len() >= cap {
            break;
        }
        let bytes = fs::read(file).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                GenddError::Setup(format!("dataset file {} not found", file.display()))
            } else {
                GenddError::io(file, e)
            }
        })?;
        ensure!(bytes.len() % record == 0, "{} is not a whole number of {record}-byte records", file.display());
        for chunk in bytes.chunks_exact(record) {
            if labels.len() >= cap {
                break;
            }
            let y = chunk[label_bytes - 1] as usize;
            ensure!(y < num_classes, "label {y} in {} exceeds {num_classes} classes", file.display());
            labels.push(y);
            for (i, &px) in chunk[label_bytes..].iter().enumerate() {
                let ch = i / 1024;
                rows.push((px as f64 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]);
            }
        }
    }
    let n = labels.len();
    let inputs = Array2::from_shape_vec((n, CIFAR_RECORD), rows).expect("record size");
    Dataset::new(format!("cifar{num_classes}-{split:?}").to_lowercase(), inputs, labels, num_classes, InputShape::image(3, 32, 32))
}

/// `root/<class>/<image>` with classes in sorted order; images are resized to
/// `size x size` RGB and scaled to `[-1, 1]`.
pub fn load_image_folder(root: &Path, size: u32, limit_per_class: Option<usize>) -> Result<Dataset> {
    let read_dir = |p: &Path| fs::read_dir(p).map_err(|e| GenddError::Setup(format!("cannot read {}: {e}", p.display())));
    let mut classes: Vec<PathBuf> = read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    ensure!(classes.len() >= 2, "{} has fewer than two class folders", root.display());
    let s = size as usize;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        files.sort();
        files.truncate(limit_per_class.unwrap_or(usize::MAX));
        for file in files {
            let img = image::open(&file)
                .map_err(|e| GenddError::Setup(format!("cannot decode {}: {e}", file.display())))?
                .resize_exact(size, size, image::imageops::FilterType::Triangle)
                .to_rgb8();
            let mut planar = vec![0.0; 3 * s * s];
            for (x, y, px) in img.enumerate_pixels() {
                for ch in 0..3 {
                    planar[ch * s * s + y as usize * s + x as usize] = px[ch] as f64 / 127.5 - 1.0;
                }
            }
            rows.extend(planar);
            labels.push(c);
        }
    }
    let n = labels.len();
    ensure!(n > 0, "no images under {}", root.display());
    let inputs = Array2::from_shape_vec((n, 3 * s * s), rows).expect("image size");
    Dataset::new(root.display().to_string(), inputs, labels, classes.len(), InputShape::image(3, s, s))
}

/// Random crop with zero padding plus horizontal flip, applied in place.
pub fn augment_row(row: &mut [f64], shape: InputShape, pad: usize, rng: &mut ChaCha8Rng) {
    if shape.height == 1 && shape.width == 1 {
        return;
    }
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let flip = rng.random_bool(0.5);
    let src = row.to_vec();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let sj = if flip { w - 1 - j } else { j } as isize + dx;
                let si = i as isize + dy;
                row[(ch * h + i) * w + j] = if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                    src[(ch * h + si as usize) * w + sj as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub index: usize,
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Shuffled epoch order, deterministic in `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Producer thread that assembles batches of `order`, starting at batch
/// `start`, into a channel holding at most `capacity` batches. Augmentation
/// draws from a per-batch stream so the output does not depend on consumer
/// timing or on where the epoch was resumed.
pub fn spawn_loader(
    data: Arc<Dataset>,
    order: Vec<usize>,
    batch_size: usize,
    start: usize,
    augment: Option<u64>,
    capacity: usize,
) -> Receiver<Batch> {
    let (tx, rx) = sync_channel(capacity.max(1));
    thread::spawn(move || {
        for (index, chunk) in order.chunks(batch_size.max(1)).enumerate().skip(start) {
            let mut inputs = data.inputs.select(Axis(0), chunk);
            if let Some(seed) = augment {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index as u64);
                for mut row in inputs.rows_mut() {
                    augment_row(row.as_slice_mut().expect("owned rows are contiguous"), data.shape, 4, &mut rng);
                }
            }
            let labels = chunk.iter().map(|&i| data.labels[i]).collect();
            if tx.send(Batch { index, inputs, labels }).is_err() {
                return;
            }
        }
    });
    rx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotGroup {
    Many,
    Medium,
    Few,
}

impl ShotGroup {
    /// More than 100 training images is many-shot, fewer than 20 few-shot.
    pub fn of(train_count: usize) -> Self {
        if train_count > 100 {
            ShotGroup::Many
        } else if train_count >= 20 {
            ShotGroup::Medium
        } else {
            ShotGroup::Few
        }
    }
}
