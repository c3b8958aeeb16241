//! Checkpoint archives.
//!
//! Layout: the ASCII line `INPAINT-ARCHIVE\n`, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f32` values in
//! row-major order, concatenated in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_discriminator, build_encoder, build_generator, ArchConfig, ModelBundle, Refiner};
use crate::error::{Error, Result};
use crate::nn::Sequential;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"INPAINT-ARCHIVE\n";
const MAX_HEADER: u64 = 64 << 20;

/// A JSON header plus named `f32` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Vec<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    format_version: u32,
    header: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let raw = RawHeader {
        format_version: FORMAT_VERSION,
        header: archive.header.clone(),
        tensors: archive
            .tensors
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.clone(),
                len: v.len(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&raw).map_err(|e| corrupt(e.to_string()))?;
    let tmp = path.with_extension("partial");
    let io = |e| Error::io(path, e);
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io)?);
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&header).map_err(io)?;
        for (_, values) in &archive.tensors {
            for v in values {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        out.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| corrupt(format!("{} is not a checkpoint archive", path.display())))?;
    if rest.len() < 8 {
        return Err(corrupt("truncated header length"));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
    if hlen > MAX_HEADER || hlen as usize > rest.len() - 8 {
        return Err(corrupt("header length exceeds file"));
    }
    let (head, mut blob) = rest[8..].split_at(hlen as usize);
    let raw: RawHeader = serde_json::from_slice(head).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if raw.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            raw.format_version
        )));
    }
    let mut tensors = Vec::with_capacity(raw.tensors.len());
    for entry in raw.tensors {
        let nbytes = entry
            .len
            .checked_mul(4)
            .filter(|&n| n <= blob.len())
            .ok_or_else(|| corrupt(format!("tensor {} is truncated", entry.name)))?;
        let (data, tail) = blob.split_at(nbytes);
        blob = tail;
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((entry.name, values));
    }
    if !blob.is_empty() {
        return Err(corrupt(format!("{} trailing bytes after the last tensor", blob.len())));
    }
    Ok(Archive {
        header: raw.header,
        tensors,
    })
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    kind: String,
    version: String,
    arch: ArchConfig,
    meta: BTreeMap<String, serde_json::Value>,
    networks: Vec<String>,
}

const BUNDLE_KIND: &str = "model_bundle";
const NETWORKS: [&str; 4] = ["generator", "encoder", "discriminator", "refiner"];

fn stacks(b: &ModelBundle) -> Vec<(String, &Sequential)> {
    let mut out = Vec::new();
    if let Some(g) = &b.generator {
        out.push(("generator".to_string(), g));
    }
    if let Some(e) = &b.encoder {
        out.push(("encoder".to_string(), e));
    }
    if let Some(d) = &b.discriminator {
        out.push(("discriminator".into(), d));
    }
    if let Some(r) = &b.refiner {
        out.extend(r.named_stacks().into_iter().map(|(n, s)| (format!("refiner/{n}"), s)));
    }
    out
}

fn stacks_mut(b: &mut ModelBundle) -> Vec<(String, &mut Sequential)> {
    let mut out = Vec::new();
    if let Some(g) = &mut b.generator {
        out.push(("generator".to_string(), g));
    }
    if let Some(e) = &mut b.encoder {
        out.push(("encoder".to_string(), e));
    }
    if let Some(d) = &mut b.discriminator {
        out.push(("discriminator".into(), d));
    }
    if let Some(r) = &mut b.refiner {
        out.extend(r.named_stacks_mut().into_iter().map(|(n, s)| (format!("refiner/{n}"), s)));
    }
    out
}

pub fn save_bundle(b: &ModelBundle, path: &Path) -> Result<()> {
    let networks = b.networks().into_iter().map(String::from).collect();
    let header = BundleHeader {
        kind: BUNDLE_KIND.into(),
        version: b.version.clone(),
        arch: b.arch.clone(),
        meta: b.meta.clone(),
        networks,
    };
    let tensors = stacks(b)
        .into_iter()
        .flat_map(|(prefix, s)| {
            s.named_params()
                .into_iter()
                .map(move |(n, v)| (format!("{prefix}/{n}"), v.to_vec()))
        })
        .collect();
    let header = serde_json::to_value(header).map_err(|e| corrupt(e.to_string()))?;
    write_archive(path, &Archive { header, tensors })
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let archive = read_archive(path)?;
    let header: BundleHeader =
        serde_json::from_value(archive.header).map_err(|e| corrupt(format!("bad bundle header: {e}")))?;
    if header.kind != BUNDLE_KIND {
        return Err(corrupt(format!("archive holds a {}, not a model bundle", header.kind)));
    }
    header
        .arch
        .validate()
        .map_err(|e| corrupt(format!("invalid architecture: {e}")))?;
    let arch = header.arch;
    if let Some(bad) = header.networks.iter().find(|n| !NETWORKS.contains(&n.as_str())) {
        return Err(corrupt(format!("unknown network {bad}")));
    }
    let has = |n: &str| header.networks.iter().any(|x| x == n);
    // shapes only; every value is overwritten below
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bundle = ModelBundle {
        generator: has("generator").then(|| build_generator(&arch, &mut rng)),
        encoder: has("encoder").then(|| build_encoder(&arch, &mut rng)),
        discriminator: has("discriminator").then(|| build_discriminator(&arch, &mut rng)),
        refiner: has("refiner").then(|| Refiner::new(arch.refiner_width, &mut rng)),
        arch,
        version: header.version,
        meta: header.meta,
    };
    let mut stored: BTreeMap<String, Vec<f32>> = archive.tensors.into_iter().collect();
    for (prefix, stack) in stacks_mut(&mut bundle) {
        for (name, slot) in stack.named_params_mut() {
            let key = format!("{prefix}/{name}");
            let values = stored
                .remove(&key)
                .ok_or_else(|| corrupt(format!("missing tensor {key}")))?;
            if values.len() != slot.len() {
                return Err(corrupt(format!(
                    "tensor {key} has {} values, the declared architecture needs {}",
                    values.len(),
                    slot.len()
                )));
            }
            *slot = values;
        }
    }
    if let Some(extra) = stored.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(bundle)
}

/// Loads a bundle and insists on a particular working resolution.
pub fn load_bundle_for(path: &Path, resolution: usize) -> Result<ModelBundle> {
    let b = load_bundle(path)?;
    if b.arch.resolution != resolution {
        return Err(corrupt(format!(
            "bundle declares {} px, {resolution} px was requested",
            b.arch.resolution
        )));
    }
    Ok(b)
}
