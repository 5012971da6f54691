//! Synthetic domains, the RTI image format, train/test splits and the
//! on-disk dataset layout:
//!
//! ```text
//! <root>/<domain>/manifest.json
//! <root>/<domain>/<case>_img.rti
//! <root>/<domain>/<case>_lbl.rti
//! ```

mod rti;
mod synth;

pub use rti::{decode as decode_rti, encode as encode_rti, read_label, read_rti, write_rti, MAGIC as RTI_MAGIC};
pub use synth::{gen_domain, Case, DomainSpec};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Rng;
use crate::error::{Error, Result};

const SPLIT_STREAM: u64 = 0x5917;
pub const MANIFEST_VERSION: u32 = 1;

/// Disjoint, exhaustive partition of case indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n_cases` with `seed` and holds out `round(n · fraction)`
/// cases (at least one) for testing.
pub fn split_dataset(n_cases: usize, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    if n_cases < 5 {
        return Err(Error::InvalidArgument(format!("need at least 5 cases to split, got {n_cases}")));
    }
    let mut order: Vec<usize> = (0..n_cases).collect();
    Rng::new(seed, SPLIT_STREAM).shuffle(&mut order);
    let n_test = ((n_cases as f64 * test_fraction).round() as usize).clamp(1, n_cases - 1);
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, test })
}

/// `manifest.json` of one domain directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainManifest {
    pub version: u32,
    pub spec: DomainSpec,
    pub spec_hash: String,
    pub split_seed: u64,
    pub test_fraction: f64,
    pub cases: Vec<String>,
    pub split: Split,
}

/// A domain loaded from disk.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub manifest: DomainManifest,
    pub train: Vec<Case>,
    pub test: Vec<Case>,
}

impl DomainData {
    pub fn name(&self) -> &str {
        &self.manifest.spec.name
    }
}

/// Generates a domain, writes its cases and manifest under `root/<name>`.
pub fn write_domain(root: &Path, spec: &DomainSpec, test_fraction: f64, split_seed: u64) -> Result<DomainManifest> {
    let cases = gen_domain(spec)?;
    let split = split_dataset(cases.len(), test_fraction, split_seed)?;
    let dir = root.join(&spec.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for case in &cases {
        write_rti(&dir.join(format!("{}_img.rti", case.id)), &case.image)?;
        write_rti(&dir.join(format!("{}_lbl.rti", case.id)), &case.label)?;
    }
    let manifest = DomainManifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        spec_hash: spec.hash(),
        split_seed,
        test_fraction,
        cases: cases.iter().map(|c| c.id.clone()).collect(),
        split,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads `root/<name>`, verifying the manifest against its spec.
pub fn load_domain(dir: &Path) -> Result<DomainData> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DomainManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(&path, format!("unsupported manifest version {}", manifest.version)));
    }
    if manifest.spec_hash != manifest.spec.hash() {
        return Err(Error::format(&path, "spec hash does not match the spec"));
    }
    let n = manifest.cases.len();
    let mut seen = vec![false; n];
    for &i in manifest.split.train.iter().chain(&manifest.split.test) {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::format(&path, format!("split index {i} repeated or out of range")));
        }
    }
    if seen.contains(&false) {
        return Err(Error::format(&path, "split does not cover every case"));
    }
    let load = |idx: &[usize]| -> Result<Vec<Case>> {
        idx.iter()
            .map(|&i| {
                let id = &manifest.cases[i];
                let image = read_rti(&dir.join(format!("{id}_img.rti")))?;
                let label = read_label(&dir.join(format!("{id}_lbl.rti")))?;
                if image.shape() != label.shape() {
                    return Err(Error::Data(format!("case {id}: image and label shapes differ")));
                }
                Ok(Case {
                    id: id.clone(),
                    image,
                    label,
                })
            })
            .collect()
    };
    Ok(DomainData {
        train: load(&manifest.split.train)?,
        test: load(&manifest.split.test)?,
        manifest,
    })
}

/// Domain directories under `root`, in the order given by `names`, or
/// sorted by name when `names` is empty.
pub fn domain_dirs(root: &Path, names: &[String]) -> Result<Vec<PathBuf>> {
    if !names.is_empty() {
        return Ok(names.iter().map(|n| root.join(n)).collect());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifty_cases_split_forty_ten() {
        let s = split_dataset(50, 0.2, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (40, 10));
        assert_eq!(s, split_dataset(50, 0.2, 1).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn split_errors() {
        assert!(split_dataset(4, 0.2, 0).is_err());
        assert!(split_dataset(10, 0.0, 0).is_err());
        assert!(split_dataset(10, 1.0, 0).is_err());
    }
}
