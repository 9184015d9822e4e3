//! Importer for the CIFAR binary batch files.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const SIDE: usize = 32;
const PIXELS: usize = SIDE * SIDE * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarKind {
    /// One label byte per record, 10 classes.
    Cifar10,
    /// Coarse and fine label bytes per record; the fine label is kept.
    Cifar100,
}

impl CifarKind {
    fn label_bytes(self) -> usize {
        match self {
            Self::Cifar10 => 1,
            Self::Cifar100 => 2,
        }
    }

    fn classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }
}

/// Decodes one batch file; images are stored as three 32x32 planes.
pub fn read_cifar_file(path: &Path, kind: CifarKind) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let rec = kind.label_bytes() + PIXELS;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Format(format!(
            "{}: {} bytes is not a whole number of {rec}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks(rec) {
        labels.push(r[kind.label_bytes() - 1] as i16);
        let planes = &r[kind.label_bytes()..];
        for p in 0..SIDE * SIDE {
            for ch in 0..3 {
                images.push(planes[ch * SIDE * SIDE + p]);
            }
        }
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, (SIDE, SIDE, 3), kind.classes(), images, labels)
}

/// Reads a CIFAR directory and returns `(train, test)`. CIFAR-10 layouts
/// (`data_batch_*.bin`, `test_batch.bin`) and CIFAR-100 layouts
/// (`train.bin`, `test.bin`) are recognised.
pub fn import_cifar(dir: &Path) -> Result<(Dataset, Dataset)> {
    let join = |files: &[std::path::PathBuf], kind| -> Result<Dataset> {
        let mut it = files.iter();
        let first = it.next().ok_or_else(|| Error::Format("no batch files".into()))?;
        let mut d = read_cifar_file(first, kind)?;
        for f in it {
            d = d.concat(&read_cifar_file(f, kind)?)?;
        }
        Ok(d)
    };
    if dir.join("train.bin").exists() {
        let train = read_cifar_file(&dir.join("train.bin"), CifarKind::Cifar100)?;
        let test = read_cifar_file(&dir.join("test.bin"), CifarKind::Cifar100)?;
        return Ok((train, test));
    }
    let mut batches: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    batches.sort();
    if batches.is_empty() {
        return Err(Error::Format(format!("{} holds no CIFAR batch files", dir.display())));
    }
    let train = join(&batches, CifarKind::Cifar10)?;
    let test = join(&[dir.join("test_batch.bin")], CifarKind::Cifar10)?;
    Ok((train, test))
}
