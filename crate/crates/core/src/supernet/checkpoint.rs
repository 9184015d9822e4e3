//! Single-file weight container.
//!
//! Layout: the 8-byte magic `TOFACKP1`, a little-endian `u64` manifest
//! length, the UTF-8 manifest, then a blob of little-endian `f32` values.
//! Manifest lines are one of
//!
//! ```text
//! meta <key> <value>
//! profile <profile line>
//! tensor <name> <d0>x<d1>x... <byte offset> <value count>
//! ```
//!
//! Tensor ranges must tile the blob exactly, in order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::Supernet;
use crate::error::{Error, Result};
use crate::space::{load_profile, SearchSpace};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TOFACKP1";

pub(crate) struct Container {
    pub meta: BTreeMap<String, String>,
    pub profile: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Container {
    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("manifest lacks `{key}`")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Format(format!("manifest `{key}` is not an integer")))
    }

    fn meta_f32(&self, key: &str) -> Result<f32> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Format(format!("manifest `{key}` is not a number")))
    }
}

pub(crate) fn write_container(
    path: &Path,
    meta: &BTreeMap<String, String>,
    profile: &str,
    tensors: &[(String, Vec<usize>, &[f32])],
) -> Result<()> {
    let mut manifest = String::new();
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::Format(format!("metadata entry `{k}` cannot be stored")));
        }
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    for line in profile.lines() {
        manifest.push_str(&format!("profile {line}\n"));
    }
    let mut blob = Vec::new();
    for (name, shape, data) in tensors {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "tensor {name} {} {} {}\n",
            dims.join("x"),
            blob.len(),
            data.len()
        ));
        for v in data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut bytes = Vec::with_capacity(16 + manifest.len() + blob.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(manifest.as_bytes());
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub(crate) fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if mlen > body.len() {
        return Err(bad("manifest is truncated"));
    }
    let manifest = std::str::from_utf8(&body[..mlen]).map_err(|_| bad("manifest is not UTF-8"))?;
    let blob = &body[mlen..];

    let mut meta = BTreeMap::new();
    let mut profile = String::new();
    let mut tensors = Vec::new();
    let mut expected_offset = 0usize;
    for (i, line) in manifest.lines().enumerate() {
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        match kind {
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            }
            "profile" => {
                profile.push_str(rest);
                profile.push('\n');
            }
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                let err = || bad(format!("manifest line {} is malformed", i + 1));
                if f.len() != 4 {
                    return Err(err());
                }
                let shape = f[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err())?;
                let offset: usize = f[2].parse().map_err(|_| err())?;
                let count: usize = f[3].parse().map_err(|_| err())?;
                if offset != expected_offset || shape.iter().product::<usize>() != count {
                    return Err(bad(format!("tensor `{}` does not tile the blob", f[0])));
                }
                let end = offset + 4 * count;
                if end > blob.len() {
                    return Err(bad(format!("blob is truncated inside tensor `{}`", f[0])));
                }
                let data = blob[offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                tensors.push((f[0].to_string(), shape, data));
                expected_offset = end;
            }
            "" => {}
            other => return Err(bad(format!("unknown manifest entry `{other}`"))),
        }
    }
    if expected_offset != blob.len() {
        return Err(bad(format!(
            "blob holds {} bytes, manifest covers {expected_offset}",
            blob.len()
        )));
    }
    Ok(Container {
        meta,
        profile,
        tensors,
    })
}

const RESERVED: &[&str] = &["kind", "num_classes", "profile_name", "dropout", "drop_connect"];

/// Writes every parameter and running statistic of `net` to `path`.
pub fn save_checkpoint(net: &Supernet, path: &Path) -> Result<()> {
    let mut meta = net.meta.clone();
    meta.insert("kind".into(), "supernet".into());
    meta.insert("num_classes".into(), net.num_classes.to_string());
    meta.insert("profile_name".into(), net.space.name.clone());
    meta.insert("dropout".into(), net.dropout.to_string());
    meta.insert("drop_connect".into(), net.drop_connect.to_string());
    let mut tensors: Vec<(String, Vec<usize>, &[f32])> = net
        .params
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.shape().to_vec(), t.data()))
        .collect();
    for rs in &net.running {
        tensors.push((format!("{}.running_mean", rs.name), vec![rs.mean.len()], &rs.mean));
        tensors.push((format!("{}.running_var", rs.name), vec![rs.var.len()], &rs.var));
    }
    write_container(path, &meta, &net.space.profile_text, &tensors)
}

/// Fresh classifier for transfer to a task with a different label set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadReinit {
    pub num_classes: usize,
    pub seed: u64,
}

fn is_head(name: &str) -> bool {
    name.starts_with("classifier.")
}

/// Loads a supernet. With `reinit_head`, the classifier is replaced and
/// every other tensor is restored unchanged.
pub fn load_checkpoint(path: &Path, reinit_head: Option<HeadReinit>) -> Result<Supernet> {
    let c = read_container(path)?;
    if c.meta_str("kind")? != "supernet" {
        return Err(bad(format!("{} does not hold a supernet", path.display())));
    }
    let space = load_profile(&c.profile)?;
    let stored_classes = c.meta_usize("num_classes")?;
    let mut net = Supernet::init(&space, stored_classes, 0)?;
    net.dropout = c.meta_f32("dropout")?;
    net.drop_connect = c.meta_f32("drop_connect")?;

    let stats: BTreeMap<String, usize> = net
        .running
        .iter()
        .enumerate()
        .flat_map(|(i, rs)| {
            [
                (format!("{}.running_mean", rs.name), i),
                (format!("{}.running_var", rs.name), i),
            ]
        })
        .collect();
    let mut seen = 0;
    for (name, shape, data) in c.tensors {
        if let Some(id) = net.params.id(&name) {
            let t = net.params.get_mut(id);
            if t.shape() != shape.as_slice() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "`{name}` has shape {shape:?}, this space needs {:?}",
                    t.shape()
                )));
            }
            *t = Tensor::new(shape, data)?.with_requires_grad(true);
        } else if let Some(&i) = stats.get(&name) {
            let rs = &mut net.running[i];
            let dst = if name.ends_with("mean") { &mut rs.mean } else { &mut rs.var };
            if dst.len() != data.len() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "`{name}` holds {} values, expected {}",
                    data.len(),
                    dst.len()
                )));
            }
            *dst = data;
        } else {
            return Err(Error::IncompatibleCheckpoint(format!("unknown tensor `{name}`")));
        }
        seen += 1;
    }
    if seen != net.params.len() + 2 * net.running.len() {
        return Err(Error::IncompatibleCheckpoint("checkpoint is missing tensors".into()));
    }
    net.meta = c
        .meta
        .into_iter()
        .filter(|(k, _)| !RESERVED.contains(&k.as_str()))
        .collect();
    if let Some(h) = reinit_head {
        net.reinit_head(h.num_classes, h.seed)?;
    }
    Ok(net)
}

impl Supernet {
    /// Errors unless `space` has the same architecture choices as this
    /// network's own space.
    pub fn check_space_compatible(&self, space: &SearchSpace) -> Result<()> {
        let a = &self.space;
        if a.in_channels != space.in_channels
            || a.resolutions != space.resolutions
            || a.stem != space.stem
            || a.stages != space.stages
            || a.head != space.head
        {
            return Err(Error::IncompatibleCheckpoint(format!(
                "weights were trained for profile `{}`, which differs from `{}`",
                a.name, space.name
            )));
        }
        Ok(())
    }

    /// Names of tensors replaced by [`Supernet::reinit_head`].
    pub fn head_tensor_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, n, _)| is_head(n))
            .map(|(_, n, _)| n.to_string())
            .collect()
    }
}
