//! Dataset ingestion, class imbalance, pretext transforms and mini-batching.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::nets::Tensor;
use crate::rng::Rng;

pub const CIFAR10_SHAPE: ImageShape = ImageShape {
    channels: 3,
    height: 32,
    width: 32,
};
pub const CIFAR10_CLASSES: usize = 10;
pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR10_RECORDS_PER_FILE: usize = 10_000;

/// Bytes per record: one label byte followed by the planar pixels.
pub fn record_len(shape: ImageShape) -> usize {
    1 + shape.numel()
}

/// Parses label-byte + planar-pixel records, scaling pixels to `[0, 1]`.
pub fn decode_records(
    bytes: &[u8],
    shape: ImageShape,
    num_classes: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let rec = record_len(shape);
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * shape.numel());
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(rec) {
        let y = usize::from(r[0]);
        if y >= num_classes {
            return Err(Error::Format(format!("label byte {y} >= {num_classes} classes")));
        }
        labels.push(y);
        pixels.extend(r[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((pixels, labels))
}

/// Inverse of [`decode_records`]; pixels are quantized to the nearest byte.
pub fn encode_records(dataset: &Dataset) -> Result<Vec<u8>> {
    if dataset.num_classes() > 256 {
        return Err(Error::invalid("labels do not fit in one byte"));
    }
    let mut out = Vec::with_capacity(dataset.len() * record_len(dataset.shape()));
    for i in 0..dataset.len() {
        out.push(dataset.label(i) as u8);
        out.extend(
            dataset
                .image(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn load_records(path: &Path, shape: ImageShape, num_classes: usize) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let (pixels, labels) = decode_records(&bytes, shape, num_classes)?;
    Dataset::new(shape, pixels, labels, num_classes)
}

/// Loads the five CIFAR-10 training batch files from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let rec = record_len(CIFAR10_SHAPE);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in CIFAR10_TRAIN_FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        if bytes.len() != CIFAR10_RECORDS_PER_FILE * rec {
            return Err(Error::Format(format!(
                "{}: expected {} records ({} bytes), found {} bytes",
                path.display(),
                CIFAR10_RECORDS_PER_FILE,
                CIFAR10_RECORDS_PER_FILE * rec,
                bytes.len()
            )));
        }
        let (p, l) = decode_records(&bytes, CIFAR10_SHAPE, CIFAR10_CLASSES)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::new(CIFAR10_SHAPE, pixels, labels, CIFAR10_CLASSES)
}

/// Parameters of the class-conditional synthetic image generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, per_class: usize, side: usize) -> Self {
        SyntheticSpec {
            num_classes,
            per_class,
            side,
            channels: 3,
            noise: 0.25,
        }
    }
}

/// Synthetic dataset with the default channel count and noise level.
pub fn make_synthetic(num_classes: usize, per_class: usize, side: usize, rng: &mut Rng) -> Result<Dataset> {
    make_synthetic_with(SyntheticSpec::new(num_classes, per_class, side), rng)
}

/// Class `k` is a sinusoidal grating at orientation `k * pi / (2 * num_classes)` with a
/// random per-image phase, plus independent Gaussian pixel noise, clipped to `[0, 1]`.
/// Examples are interleaved by class: example `i` has label `i % num_classes`.
pub fn make_synthetic_with(spec: SyntheticSpec, rng: &mut Rng) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.per_class == 0 || spec.side == 0 || spec.channels == 0 {
        return Err(Error::invalid("synthetic dataset counts must be positive"));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::invalid("noise must be finite and >= 0"));
    }
    let shape = ImageShape::square(spec.channels, spec.side);
    let n = spec.num_classes * spec.per_class;
    let freq = 2.0 * PI / 5.0;
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let mut pixels = Vec::with_capacity(n * shape.numel());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.num_classes;
        // orientations span a quarter turn, so no pretext transform maps one class onto another
        let theta = k as f64 * PI / (2 * spec.num_classes) as f64;
        let (s, c) = theta.sin_cos();
        let phase = rng.random_range(0.0..2.0 * PI);
        for ch in 0..spec.channels {
            // channels carry the same grating with a mild class-independent tint
            let tint = 0.05 * ch as f64;
            for y in 0..spec.side {
                for x in 0..spec.side {
                    let u = x as f64 * c + y as f64 * s;
                    let v = 0.5 + tint + 0.3 * (freq * u + phase).sin() + noise.sample(rng);
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(k);
    }
    Dataset::new(shape, pixels, labels, spec.num_classes)
}

/// Each affected class keeps `floor(count / ratio)` randomly chosen examples;
/// retained examples keep their relative order.
pub fn apply_imbalance(
    dataset: &Dataset,
    ratio: f64,
    affected: &[usize],
    rng: &mut Rng,
) -> Result<Dataset> {
    if !(ratio.is_finite() && ratio >= 1.0) {
        return Err(Error::invalid(format!("imbalance ratio must be >= 1, got {ratio}")));
    }
    if let Some(&bad) = affected.iter().find(|&&k| k >= dataset.num_classes()) {
        return Err(Error::invalid(format!(
            "class {bad} >= num_classes {}",
            dataset.num_classes()
        )));
    }
    let mut keep = vec![true; dataset.len()];
    let mut classes = affected.to_vec();
    classes.sort_unstable();
    classes.dedup();
    for k in classes {
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.label(i) == k).collect();
        let retain = (members.len() as f64 / ratio).floor() as usize;
        for &i in &members {
            keep[i] = false;
        }
        for j in index::sample(rng, members.len(), retain) {
            keep[members[j]] = true;
        }
    }
    let kept: Vec<usize> = (0..dataset.len()).filter(|&i| keep[i]).collect();
    dataset.subset(&kept)
}

/// The six self-supervised transforms; the discriminant is the pretext class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PretextTransform {
    Rot0 = 0,
    Rot90 = 1,
    Rot180 = 2,
    Rot270 = 3,
    HFlip = 4,
    VFlip = 5,
}

impl PretextTransform {
    pub const ALL: [PretextTransform; 6] = [
        PretextTransform::Rot0,
        PretextTransform::Rot90,
        PretextTransform::Rot180,
        PretextTransform::Rot270,
        PretextTransform::HFlip,
        PretextTransform::VFlip,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }
}

/// Applies `t` to one planar image. Rotations are counter-clockwise.
pub fn apply_pretext(image: &[f64], shape: ImageShape, t: PretextTransform) -> Result<Vec<f64>> {
    let (h, w) = (shape.height, shape.width);
    if image.len() != shape.numel() {
        return Err(Error::invalid("image length does not match its shape"));
    }
    if matches!(t, PretextTransform::Rot90 | PretextTransform::Rot270) && h != w {
        return Err(Error::invalid("quarter rotations need a square image"));
    }
    let mut out = vec![0.0; image.len()];
    for c in 0..shape.channels {
        let src = &image[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = match t {
                    PretextTransform::Rot0 => (i, j),
                    PretextTransform::Rot90 => (j, w - 1 - i),
                    PretextTransform::Rot180 => (h - 1 - i, w - 1 - j),
                    PretextTransform::Rot270 => (h - 1 - j, i),
                    PretextTransform::HFlip => (i, w - 1 - j),
                    PretextTransform::VFlip => (h - 1 - i, j),
                };
                dst[i * w + j] = src[si * w + sj];
            }
        }
    }
    Ok(out)
}

/// A stacked mini-batch. `labels` is present for labeled-pool batches,
/// `pretext` when a transform was applied to every image.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub pretext: Option<Vec<PretextTransform>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn pretext_codes(&self) -> Option<Vec<usize>> {
        self.pretext
            .as_ref()
            .map(|ts| ts.iter().map(|t| t.code()).collect())
    }

    /// Stacks the given examples without shuffling.
    pub fn gather(
        dataset: &Dataset,
        indices: &[usize],
        labels: bool,
        pretext: Option<Vec<PretextTransform>>,
    ) -> Result<Batch> {
        let shape = dataset.shape();
        let mut data = Vec::with_capacity(indices.len() * shape.numel());
        for (j, &i) in indices.iter().enumerate() {
            match &pretext {
                Some(ts) => data.extend(apply_pretext(dataset.image(i), shape, ts[j])?),
                None => data.extend_from_slice(dataset.image(i)),
            }
        }
        let images = Tensor::new(
            vec![indices.len(), shape.channels, shape.height, shape.width],
            data,
        );
        Ok(Batch {
            indices: indices.to_vec(),
            images,
            labels: labels.then(|| indices.iter().map(|&i| dataset.label(i)).collect()),
            pretext,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub labels: bool,
    pub pretext: bool,
}

/// Separate streams for the epoch shuffle and the pretext choice.
#[derive(Clone, Debug)]
pub struct BatchStreams {
    pub shuffle: Rng,
    pub pretext: Rng,
}

impl BatchStreams {
    pub fn new(seed: u64, label: &str) -> Self {
        BatchStreams {
            shuffle: Rng::stream(seed, &[label, "shuffle"]),
            pretext: Rng::stream(seed, &[label, "pretext"]),
        }
    }
}

/// One epoch over `indices`: a single seeded shuffle, then consecutive batches
/// with the final short batch kept. With `pretext`, every image gets its own
/// uniformly drawn transform.
pub fn batches(
    dataset: &Dataset,
    indices: &[usize],
    opts: BatchOptions,
    streams: &mut BatchStreams,
) -> Result<Vec<Batch>> {
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut streams.shuffle);
    order
        .chunks(opts.batch_size)
        .map(|chunk| {
            let pretext = opts.pretext.then(|| {
                chunk
                    .iter()
                    .map(|_| PretextTransform::ALL[streams.pretext.random_range(0..6)])
                    .collect()
            });
            Batch::gather(dataset, chunk, opts.labels, pretext)
        })
        .collect()
}

/// One epoch of `(labeled, unlabeled)` batch pairs. The larger pool is traversed
/// once; the smaller is cycled, reshuffled each time it runs out. Labeled
/// batches carry labels, unlabeled batches carry pretext transforms.
pub fn paired_epoch(
    dataset: &Dataset,
    labeled: &[usize],
    unlabeled: &[usize],
    batch_size: usize,
    labeled_streams: &mut BatchStreams,
    unlabeled_streams: &mut BatchStreams,
) -> Result<Vec<(Batch, Batch)>> {
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::state("both pools must be non-empty"));
    }
    let lopts = BatchOptions {
        batch_size,
        labels: true,
        pretext: false,
    };
    let uopts = BatchOptions {
        batch_size,
        labels: false,
        pretext: true,
    };
    let steps = labeled.len().max(unlabeled.len()).div_ceil(batch_size);
    let mut lq: VecDeque<Batch> = VecDeque::new();
    let mut uq: VecDeque<Batch> = VecDeque::new();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        if lq.is_empty() {
            lq.extend(batches(dataset, labeled, lopts, labeled_streams)?);
        }
        if uq.is_empty() {
            uq.extend(batches(dataset, unlabeled, uopts, unlabeled_streams)?);
        }
        out.push((lq.pop_front().expect("refilled"), uq.pop_front().expect("refilled")));
    }
    Ok(out)
}
