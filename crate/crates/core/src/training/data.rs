//! Dataset plumbing: directory loading, the hash-based train/validation
//! split, and on-disk formats for discriminator and refiner data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distortion::{read_manifest, realize, write_manifest, LabeledSample, SampleRecord};
use crate::error::{Error, Result};
use crate::imaging::{load_image, load_mask, save_image, save_mask, Image, Mask};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// 64-bit FNV-1a of `seed` (little endian) followed by `key`.
pub fn stable_hash(key: &str, seed: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    seed.to_le_bytes()
        .iter()
        .chain(key.as_bytes())
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Splits item indices into `(train, val)`. An item goes to validation when
/// its hash falls below `val_fraction` of the hash range, so membership
/// depends only on its key and the seed. When that leaves validation empty
/// the lowest-hash item is moved there.
pub fn split_by_hash(keys: &[String], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if keys.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 items for a train/validation split, got {}",
            keys.len()
        )));
    }
    let hashes: Vec<u64> = keys.iter().map(|k| stable_hash(k, seed)).collect();
    let cut = (val_fraction * u64::MAX as f64) as u64;
    let (mut val, mut train): (Vec<usize>, Vec<usize>) = (0..keys.len()).partition(|&i| hashes[i] < cut);
    if val.is_empty() {
        let lowest = (0..keys.len()).min_by_key(|&i| (hashes[i], i)).expect("non-empty");
        train.retain(|&i| i != lowest);
        val.push(lowest);
    } else if train.is_empty() {
        let highest = (0..keys.len()).max_by_key(|&i| (hashes[i], i)).expect("non-empty");
        val.retain(|&i| i != highest);
        train.push(highest);
    }
    Ok((train, val))
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every image in `dir` at `size × size`, keyed by file name.
pub fn load_image_dir(dir: &Path, size: usize) -> Result<Vec<(String, Image)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            let key = p.file_name().expect("listed file").to_string_lossy().into_owned();
            Ok((key, load_image(&p, size)?))
        })
        .collect()
}

const DISC_MANIFEST: &str = "manifest.jsonl";

fn disc_image_name(index: usize) -> String {
    format!("images/{index:06}.png")
}

/// Labelled discriminator samples with stable keys for splitting.
#[derive(Clone, Debug, Default)]
pub struct DiscDataset {
    pub keys: Vec<String>,
    pub samples: Vec<LabeledSample>,
}

impl DiscDataset {
    pub fn from_samples(samples: Vec<LabeledSample>) -> Self {
        Self {
            keys: (0..samples.len()).map(disc_image_name).collect(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads a directory written by [`write_disc_dataset`].
    pub fn load_dir(dir: &Path, size: usize) -> Result<Self> {
        let records = read_manifest(&dir.join(DISC_MANIFEST))?;
        let mut out = Self::default();
        for r in records {
            let key = disc_image_name(r.index);
            let image = load_image(&dir.join(&key), size)?;
            out.keys.push(key);
            out.samples.push(LabeledSample { image, label: r.label });
        }
        Ok(out)
    }
}

/// Renders `records` against `sources` and writes `manifest.jsonl` plus one
/// PNG per sample under `images/`.
pub fn write_disc_dataset(dir: &Path, records: &[SampleRecord], sources: &[Image]) -> Result<DiscDataset> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let src = sources.get(r.source_index).ok_or_else(|| {
            Error::DegenerateInput(format!("record {} names source {} of {}", r.index, r.source_index, sources.len()))
        })?;
        let s = realize(r, src)?;
        save_image(&s.image, &dir.join(disc_image_name(r.index)))?;
        samples.push(s);
    }
    write_manifest(&dir.join(DISC_MANIFEST), records)?;
    Ok(DiscDataset {
        keys: records.iter().map(|r| disc_image_name(r.index)).collect(),
        samples,
    })
}

/// One refiner training triple at refiner resolution: the coarse composite,
/// its mask and the untouched original.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerSample {
    pub key: String,
    pub crg: Image,
    pub mask: Mask,
    pub org: Image,
}

#[derive(Serialize, Deserialize)]
struct RefinerIndexLine {
    key: String,
    stem: String,
}

const REFINER_INDEX: &str = "index.jsonl";

pub fn write_refiner_samples(dir: &Path, samples: &[RefinerSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:06}");
        save_image(&s.crg, &dir.join(format!("{stem}_crg.png")))?;
        save_image(&s.org, &dir.join(format!("{stem}_org.png")))?;
        save_mask(&s.mask, &dir.join(format!("{stem}_mask.png")))?;
        let line = RefinerIndexLine {
            key: s.key.clone(),
            stem,
        };
        index.push_str(&serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))?);
        index.push('\n');
    }
    let path = dir.join(REFINER_INDEX);
    std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

pub fn read_refiner_samples(dir: &Path, size: usize) -> Result<Vec<RefinerSample>> {
    let path = dir.join(REFINER_INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let line: RefinerIndexLine =
                serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            Ok(RefinerSample {
                crg: load_image(&dir.join(format!("{}_crg.png", line.stem)), size)?,
                org: load_image(&dir.join(format!("{}_org.png", line.stem)), size)?,
                mask: load_mask(&dir.join(format!("{}_mask.png", line.stem)), (size, size))?,
                key: line.key,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fnv_reference_values() {
        // FNV-1a of the empty input is the offset basis
        let empty: u64 = b"".iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        assert_eq!(empty, 0xcbf2_9ce4_8422_2325);
        let a: u64 = b"a".iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        assert_eq!(a, 0xaf63_dc4c_8601_ec8c);
        assert_ne!(stable_hash("a", 0), stable_hash("a", 1));
    }

    #[test]
    fn tiny_sets_still_get_both_sides() {
        let keys = vec!["x".to_string(), "y".to_string()];
        let (t, v) = split_by_hash(&keys, 0.1, 0).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        assert!(split_by_hash(&keys[..1], 0.1, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn split_is_a_stable_disjoint_partition(n in 2usize..400, seed in any::<u64>()) {
            let keys: Vec<String> = (0..n).map(|i| format!("img_{i}.png")).collect();
            let (t, v) = split_by_hash(&keys, 0.1, seed).unwrap();
            prop_assert_eq!(t.len() + v.len(), n);
            prop_assert!(!t.is_empty() && !v.is_empty());
            let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(split_by_hash(&keys, 0.1, seed).unwrap(), (t, v.clone()));
            // membership of a key does not depend on the other keys
            let more: Vec<String> = keys.iter().cloned().chain((0..50).map(|i| format!("extra_{i}"))).collect();
            let (_, v2) = split_by_hash(&more, 0.1, seed).unwrap();
            if v.len() > 1 || stable_hash(&keys[v[0]], seed) < (0.1 * u64::MAX as f64) as u64 {
                for i in &v {
                    prop_assert!(v2.contains(i));
                }
            }
        }
    }

    #[test]
    fn large_split_is_close_to_ninety_ten() {
        let keys: Vec<String> = (0..20_000).map(|i| format!("faces/{i:05}.png")).collect();
        let (_, v) = split_by_hash(&keys, 0.1, 7).unwrap();
        let frac = v.len() as f64 / keys.len() as f64;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
    }
}
