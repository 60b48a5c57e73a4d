//! CIFAR-10/100 binary ingestion, per-channel color normalization,
//! pad-and-crop augmentation and mini-batch ordering.
//!
//! Record layouts (one image per record, no file header):
//!
//! * CIFAR-10: 1 label byte, then 3072 pixel bytes.
//! * CIFAR-100: 1 coarse label byte, 1 fine label byte, then 3072 pixel
//!   bytes. Only the fine label is kept.
//!
//! Pixels are stored channel-major (R, G, B planes), each plane row-major
//! 32x32, and are promoted to `byte / 255`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::augment::pad_crop_flip_sample;
use crate::ops::CropSpec;
use crate::tensor::{Rng, Tensor4};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
/// Zero padding on each side before the random crop.
pub const AUGMENT_PAD: usize = 4;

pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";
pub const CIFAR100_TRAIN_FILE: &str = "train.bin";
pub const CIFAR100_TEST_FILE: &str = "test.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dataset {
    Cifar10,
    Cifar100,
}

impl Dataset {
    pub fn classes(self) -> usize {
        match self {
            Dataset::Cifar10 => 10,
            Dataset::Cifar100 => 100,
        }
    }

    /// Bytes before the pixels in one record.
    fn label_bytes(self) -> usize {
        match self {
            Dataset::Cifar10 => 1,
            Dataset::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + IMAGE_BYTES
    }

    /// Name of the directory the official archive extracts to.
    fn archive_dir(self) -> &'static str {
        match self {
            Dataset::Cifar10 => "cifar-10-batches-bin",
            Dataset::Cifar100 => "cifar-100-binary",
        }
    }

    fn files(self) -> (Vec<&'static str>, &'static str) {
        match self {
            Dataset::Cifar10 => (CIFAR10_TRAIN_FILES.to_vec(), CIFAR10_TEST_FILE),
            Dataset::Cifar100 => (vec![CIFAR100_TRAIN_FILE], CIFAR100_TEST_FILE),
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::Cifar10 => "cifar10",
            Dataset::Cifar100 => "cifar100",
        })
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "cifar10" => Ok(Dataset::Cifar10),
            "cifar100" => Ok(Dataset::Cifar100),
            _ => Err(Error::invalid("dataset", format!("unknown dataset '{s}' (cifar10|cifar100)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    /// `(N, 3, 32, 32)`.
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledImageSet {
    pub fn new(images: Tensor4<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.n() != labels.len() {
            return Err(Error::invalid(
                "LabeledImageSet",
                format!("{} images but {} labels", images.n(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(
                "LabeledImageSet",
                format!("label {bad} out of range for {class_count} classes"),
            ));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps the first `limit` images.
    pub fn truncate(&mut self, limit: usize) -> Result<()> {
        if limit >= self.len() {
            return Ok(());
        }
        let [_, c, h, w] = self.images.dims();
        let mut data = std::mem::replace(&mut self.images, Tensor4::zeros([0, c, h, w])?).into_vec();
        data.truncate(limit * c * h * w);
        self.images = Tensor4::from_vec([limit, c, h, w], data)?;
        self.labels.truncate(limit);
        Ok(())
    }

    /// Copies the listed images (in order) into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor4<f32>, Vec<usize>)> {
        let [_, c, h, w] = self.images.dims();
        let mut out = Tensor4::zeros([indices.len(), c, h, w])?;
        let mut labels = Vec::with_capacity(indices.len());
        for (dst, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::invalid("gather", format!("index {i} out of range for {} images", self.len())));
            }
            out.sample_mut(dst).copy_from_slice(self.images.sample(i));
            labels.push(self.labels[i]);
        }
        Ok((out, labels))
    }
}

/// Parses a whole file's worth of records. At most `limit` records are
/// decoded, but the full byte length is still validated.
pub fn parse_records(dataset: Dataset, path: &Path, bytes: &[u8], limit: Option<usize>) -> Result<LabeledImageSet> {
    let rec = dataset.record_len();
    if bytes.len() % rec != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a whole number of {rec}-byte records", bytes.len()),
        ));
    }
    let total = bytes.len() / rec;
    let n = limit.map_or(total, |l| l.min(total));
    let classes = dataset.classes();
    let mut images = Tensor4::zeros([n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE])?;
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        // labels are validated for every record so a bad tail is not hidden by a limit
        let label = record[dataset.label_bytes() - 1] as usize;
        if label >= classes {
            return Err(Error::format(path, format!("record {i}: label {label} >= {classes}")));
        }
        if i < n {
            labels.push(label);
            let pixels = &record[dataset.label_bytes()..];
            for (dst, &b) in images.sample_mut(i).iter_mut().zip(pixels) {
                *dst = b as f32 / 255.0;
            }
        }
    }
    LabeledImageSet::new(images, labels, classes)
}

fn concat(dataset: Dataset, parts: Vec<LabeledImageSet>) -> Result<LabeledImageSet> {
    let n: usize = parts.iter().map(LabeledImageSet::len).sum();
    let mut data = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        labels.extend_from_slice(&p.labels);
        data.extend(p.images.into_vec());
    }
    let images = Tensor4::from_vec([n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?;
    LabeledImageSet::new(images, labels, dataset.classes())
}

fn read_files(dataset: Dataset, paths: &[PathBuf], limit: Option<usize>) -> Result<LabeledImageSet> {
    let mut parts = Vec::new();
    let mut remaining = limit;
    for path in paths {
        if remaining == Some(0) {
            break;
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let part = parse_records(dataset, path, &bytes, remaining)?;
        remaining = remaining.map(|r| r - part.len());
        parts.push(part);
    }
    concat(dataset, parts)
}

/// The directory holding the record files: `dir` itself, or the archive's
/// own subdirectory inside it.
fn resolve_dir(dataset: Dataset, dir: &Path) -> PathBuf {
    let (_, test) = dataset.files();
    let nested = dir.join(dataset.archive_dir());
    if !dir.join(test).exists() && nested.join(test).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Optional caps on how many images to read, taken from the start of the
/// train files (in file order) and of the test file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Limits {
    pub train: Option<usize>,
    pub test: Option<usize>,
}

pub fn load(dataset: Dataset, dir: &Path, limits: Limits) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let dir = resolve_dir(dataset, dir);
    let (train_files, test_file) = dataset.files();
    let train_paths: Vec<PathBuf> = train_files.iter().map(|f| dir.join(f)).collect();
    let train = read_files(dataset, &train_paths, limits.train)?;
    let test = read_files(dataset, &[dir.join(test_file)], limits.test)?;
    Ok((train, test))
}

pub fn load_cifar10(dir: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    load(Dataset::Cifar10, dir, Limits::default())
}

pub fn load_cifar100(dir: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    load(Dataset::Cifar100, dir, Limits::default())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum NormalizationMode {
    /// `(x - mean_c) / std_c`.
    #[default]
    MeanStd,
    /// `x - mean_c`.
    MeanOnly,
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizationMode::MeanStd => "mean-std",
            NormalizationMode::MeanOnly => "mean-only",
        })
    }
}

impl FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-std" => Ok(NormalizationMode::MeanStd),
            "mean-only" => Ok(NormalizationMode::MeanOnly),
            _ => Err(Error::invalid(
                "normalization",
                format!("unknown mode '{s}' (mean-std|mean-only)"),
            )),
        }
    }
}

/// Per-channel training-set statistics (population standard deviation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationStats {
    pub mode: NormalizationMode,
    pub mean: [f64; IMAGE_CHANNELS],
    pub std: [f64; IMAGE_CHANNELS],
}

impl NormalizationStats {
    /// Divisor actually applied per channel.
    fn scale(&self, c: usize) -> f64 {
        match self.mode {
            NormalizationMode::MeanStd => self.std[c],
            NormalizationMode::MeanOnly => 1.0,
        }
    }
}

pub fn compute_normalization(train: &LabeledImageSet, mode: NormalizationMode) -> Result<NormalizationStats> {
    let [n, c, h, w] = train.images.dims();
    if n < 2 {
        return Err(Error::invalid("compute_normalization", format!("need at least 2 images, got {n}")));
    }
    if c != IMAGE_CHANNELS {
        return Err(Error::ChannelMismatch {
            op: "compute_normalization",
            expected: IMAGE_CHANNELS,
            found: c,
        });
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let per_channel = |f: &mut dyn FnMut(usize, f64)| {
        for sample in train.images.data().chunks_exact(c * plane) {
            for (ch, values) in sample.chunks_exact(plane).enumerate() {
                values.iter().for_each(|&v| f(ch, v as f64));
            }
        }
    };
    // two passes, so a constant channel has exactly zero variance
    let mut mean = [0.0f64; IMAGE_CHANNELS];
    per_channel(&mut |ch, v| mean[ch] += v);
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = [0.0f64; IMAGE_CHANNELS];
    per_channel(&mut |ch, v| var[ch] += (v - mean[ch]) * (v - mean[ch]));
    let mut stats = NormalizationStats {
        mode,
        mean,
        std: [0.0; IMAGE_CHANNELS],
    };
    for ch in 0..c {
        let v = var[ch] / count;
        if !(v > 0.0) {
            return Err(Error::invalid(
                "compute_normalization",
                format!("channel {ch} has zero variance"),
            ));
        }
        stats.std[ch] = v.sqrt();
    }
    Ok(stats)
}

pub fn normalize_in_place(set: &mut LabeledImageSet, stats: &NormalizationStats) -> Result<()> {
    let [_, c, h, w] = set.images.dims();
    if c != IMAGE_CHANNELS {
        return Err(Error::ChannelMismatch {
            op: "apply_normalization",
            expected: IMAGE_CHANNELS,
            found: c,
        });
    }
    let plane = h * w;
    for sample in set.images.data_mut().chunks_exact_mut(c * plane) {
        for (ch, values) in sample.chunks_exact_mut(plane).enumerate() {
            let mean = stats.mean[ch];
            let inv = 1.0 / stats.scale(ch);
            for v in values {
                *v = ((*v as f64 - mean) * inv) as f32;
            }
        }
    }
    Ok(())
}

pub fn apply_normalization(set: &LabeledImageSet, stats: &NormalizationStats) -> Result<LabeledImageSet> {
    let mut out = set.clone();
    normalize_in_place(&mut out, stats)?;
    Ok(out)
}

/// Crop offsets uniform in `[0, 2 pad]` on each axis, flip with probability
/// 1/2. Draw order: `offset_y`, `offset_x`, `flip`.
pub fn random_crop_spec(rng: &mut Rng, pad: usize, crop: usize) -> CropSpec {
    let offset_y = rng.below(2 * pad + 1);
    let offset_x = rng.below(2 * pad + 1);
    let flip = rng.coin();
    CropSpec {
        pad,
        crop,
        offset_y,
        offset_x,
        flip,
    }
}

/// Training-time augmentation: for each image in turn, pad by 4 with zeros,
/// take a random crop of the original size, and flip it with probability 1/2.
pub fn augment_batch(images: &Tensor4<f32>, rng: &mut Rng) -> Result<Tensor4<f32>> {
    let [n, c, h, w] = images.dims();
    if h != w {
        return Err(Error::invalid("augment_batch", format!("images must be square, got {h}x{w}")));
    }
    let mut out = Tensor4::zeros(images.dims())?;
    for i in 0..n {
        let spec = random_crop_spec(rng, AUGMENT_PAD, h);
        pad_crop_flip_sample(images.sample(i), [c, h, w], &spec, out.sample_mut(i));
    }
    Ok(out)
}

/// Splits `0..len` into consecutive batches of `batch_size`; the last batch
/// may be short. With an RNG the indices are a seeded permutation, without
/// one they stay in order.
pub fn batch_order(len: usize, batch_size: usize, shuffle: Option<&mut Rng>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_order", "batch_size must be at least 1"));
    }
    let order = match shuffle {
        Some(rng) => rng.permutation(len),
        None => (0..len).collect(),
    };
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
