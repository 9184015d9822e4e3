//! Image datasets, the TDS file format, labeled/unlabeled splitting,
//! augmentation and cyclic batching.

mod augment;
mod cifar;
mod stream;
mod synth;

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{
    resize_batch, resize_bilinear, strong_augment, weak_augment, StrongOp, WeakParams, STRONG_OPS,
};
pub use cifar::{import_cifar, read_cifar_file, CifarKind};
pub use stream::{BatchStream, LabeledBatch, UnlabeledBatch};
pub use synth::{synth_blobs, SynthSpec};

/// Label value marking an unlabeled sample.
pub const UNLABELED: i16 = -1;

const TDS_MAGIC: &[u8; 4] = b"TDS1";

/// `N` images of `H x W x C` bytes (channels last) with `i16` labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub images: Vec<u8>,
    pub labels: Vec<i16>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        (height, width, channels): (usize, usize, usize),
        num_classes: usize,
        images: Vec<u8>,
        labels: Vec<i16>,
    ) -> Result<Self> {
        let d = Self {
            name: name.into(),
            height,
            width,
            channels,
            num_classes,
            images,
            labels,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Validation("image dimensions must be positive".into()));
        }
        if self.images.len() != self.labels.len() * self.image_len() {
            return Err(Error::Validation(format!(
                "{} pixel bytes for {} images of {}",
                self.images.len(),
                self.labels.len(),
                self.image_len()
            )));
        }
        if self.num_classes > i16::MAX as usize {
            return Err(Error::Validation(format!("{} classes is too many", self.num_classes)));
        }
        if let Some((i, y)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y != UNLABELED && (y < 0 || y as usize >= self.num_classes))
        {
            return Err(Error::Validation(format!(
                "sample {i} has label {y} but there are {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        let y = self.labels[i];
        (y != UNLABELED).then_some(y as usize)
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.labels.iter().all(|&y| y != UNLABELED)
    }

    /// Number of labeled samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for y in self.labels.iter().filter(|&&y| y != UNLABELED) {
            counts[*y as usize] += 1;
        }
        counts
    }

    /// New dataset holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            name: self.name.clone(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_classes: self.num_classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Joins two datasets with the same image shape and class count.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if (self.height, self.width, self.channels, self.num_classes)
            != (other.height, other.width, other.channels, other.num_classes)
        {
            return Err(Error::Contract("datasets differ in shape or class count".into()));
        }
        let mut out = self.clone();
        out.images.extend_from_slice(&other.images);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    pub fn write_tds(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let dim = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::Validation(format!("{what} {v} does not fit the format")))
        };
        let mut buf = Vec::with_capacity(16 + self.len() * (2 + self.image_len()));
        buf.extend_from_slice(TDS_MAGIC);
        let n = u32::try_from(self.len())
            .map_err(|_| Error::Validation("too many samples for the format".into()))?;
        buf.extend_from_slice(&n.to_le_bytes());
        buf.extend_from_slice(&dim(self.height, "height")?.to_le_bytes());
        buf.extend_from_slice(&dim(self.width, "width")?.to_le_bytes());
        buf.push(u8::try_from(self.channels).map_err(|_| Error::Validation("too many channels".into()))?);
        buf.push(0);
        buf.extend_from_slice(&dim(self.num_classes, "class count")?.to_le_bytes());
        for i in 0..self.len() {
            buf.extend_from_slice(&self.labels[i].to_le_bytes());
            buf.extend_from_slice(self.image(i));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_tds(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::decode_tds(&bytes, name)
    }

    pub fn decode_tds(bytes: &[u8], name: String) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != TDS_MAGIC {
            return Err(Error::Format("not a TDS1 file".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let (h, w, c) = (u16_at(8), u16_at(10), bytes[12] as usize);
        let classes = u16_at(14);
        let rec = 2 + h * w * c;
        if bytes.len() != 16 + n * rec {
            return Err(Error::Format(format!(
                "expected {} bytes for {n} records, found {}",
                16 + n * rec,
                bytes.len()
            )));
        }
        let mut images = Vec::with_capacity(n * (rec - 2));
        let mut labels = Vec::with_capacity(n);
        for r in bytes[16..].chunks(rec) {
            labels.push(i16::from_le_bytes([r[0], r[1]]));
            images.extend_from_slice(&r[2..]);
        }
        if n == 0 {
            return Err(Error::Validation("dataset holds no samples".into()));
        }
        Self::new(name, (h, w, c), classes, images, labels)
    }
}

/// Draws `per_class` labeled samples of every class without replacement;
/// the rest become unlabeled. Unlabeled input samples stay unlabeled.
pub fn split_labeled(d: &Dataset, per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if per_class == 0 {
        return Err(Error::Contract("per_class must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.num_classes];
    for i in 0..d.len() {
        if let Some(y) = d.label(i) {
            by_class[y].push(i);
        }
    }
    if let Some((c, have)) = by_class.iter().enumerate().find(|(_, v)| v.len() < per_class) {
        return Err(Error::Contract(format!(
            "class {c} has {} samples, fewer than {per_class}",
            have.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; d.len()];
    let mut labeled = Vec::with_capacity(per_class * d.num_classes);
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &i in &members[..per_class] {
            chosen[i] = true;
            labeled.push(i);
        }
    }
    labeled.sort_unstable();
    let rest: Vec<usize> = (0..d.len()).filter(|&i| !chosen[i]).collect();
    let mut unlabeled = d.subset(&rest);
    unlabeled.labels.iter_mut().for_each(|y| *y = UNLABELED);
    Ok((d.subset(&labeled), unlabeled))
}

/// Per-channel affine map from `[0, 1]` pixels to zero mean, unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel statistics of every pixel in `d`.
    pub fn fit(d: &Dataset) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::Contract("cannot fit normalization on an empty dataset".into()));
        }
        let c = d.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for px in d.images.chunks(c) {
            for (ch, &v) in px.iter().enumerate() {
                let v = v as f64 / 255.0;
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
        let n = (d.images.len() / c) as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| ((q / n - (s / n).powi(2)).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply_chw(&self, x: &mut [f32], plane: usize) {
        for (ch, p) in x.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            p.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }

    pub fn encode(&self) -> String {
        let list = |v: &[f32]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        format!("{};{}", list(&self.mean), list(&self.std))
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad normalization record `{s}`"));
        let (m, sd) = s.split_once(';').ok_or_else(bad)?;
        let parse = |t: &str| -> Result<Vec<f32>> {
            t.split(',').map(|v| v.trim().parse::<f32>().map_err(|_| bad())).collect()
        };
        let (mean, std) = (parse(m)?, parse(sd)?);
        if mean.len() != std.len() {
            return Err(bad());
        }
        Ok(Self { mean, std })
    }
}

/// Plain evaluation view: resize to `resolution` and standardize, no
/// augmentation. Returns an NCHW tensor.
pub fn eval_batch(d: &Dataset, indices: &[usize], resolution: usize, norm: &Normalizer) -> Result<Tensor> {
    let c = d.channels;
    let plane = resolution * resolution;
    let mut data = Vec::with_capacity(indices.len() * c * plane);
    for &i in indices {
        let chw = augment::to_chw_unit(d.image(i), d.height, d.width, c);
        let mut x = resize_bilinear(&chw, c, d.height, d.width, resolution, resolution);
        norm.apply_chw(&mut x, plane);
        data.extend(x);
    }
    Tensor::new(vec![indices.len(), c, resolution, resolution], data)
}
