//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json   model description and tensor tables
//! <dir>/weights.bin     parameter tensors, little-endian f32, table order
//! <dir>/optimizer.bin   Adam moments (m then v per tensor), same layout
//! <dir>/ewc.bin         consolidation anchors and Fisher diagonals
//! ```
//!
//! Every table entry records name, shape, byte offset and byte length;
//! entries are contiguous and cover their file exactly. Each file's SHA-256
//! is stored in the manifest, which is written last, so a directory with a
//! manifest is complete.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{parse_param_name, DomainInfo, FreezePolicy, NcadaptModel, Owner, Param, PerceptionScope};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nca::ArchConfig;
use crate::train::{AdamState, EwcAnchor, EwcState, Moments, TrainReport};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const EWC_FILE: &str = "ewc.bin";

/// A model together with the training state needed to continue from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: NcadaptModel,
    /// Number of completed stages.
    pub stage: usize,
    pub config_hash: String,
    pub optimizer: Option<AdamState>,
    pub ewc: Vec<EwcState>,
    pub report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data file.
    pub offset: usize,
    /// Byte length in the data file.
    pub length: usize,
    pub trainable: bool,
    pub owner: Owner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerTable {
    pub step: u64,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwcTable {
    pub lambdas: Vec<f64>,
    pub sha256: String,
    /// Entries are named `<k>/<param>.theta_star` and `<k>/<param>.fisher`
    /// for consolidation state `k`.
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config_hash: String,
    pub stage: usize,
    pub arch: ArchConfig,
    pub policy: FreezePolicy,
    pub scope: PerceptionScope,
    pub seed: u64,
    pub frozen: bool,
    pub domains: Vec<DomainInfo>,
    pub weights_sha256: String,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerTable>,
    pub ewc: Option<EwcTable>,
    pub report: Option<TrainReport>,
}

/// Tensors laid out back to back.
struct Packed {
    entries: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl Packed {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            bytes: Vec::new(),
        }
    }

    fn push(&mut self, name: String, owner: Owner, trainable: bool, t: &Tensor<f32>) {
        let data = t.to_le_bytes();
        self.entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: self.bytes.len(),
            length: data.len(),
            trainable,
            owner,
        });
        self.bytes.extend_from_slice(&data);
    }

    fn sha(&self) -> String {
        sha256(&self.bytes)
    }
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Checks the table against the file and decodes every tensor.
fn unpack(path: &Path, entries: &[TensorEntry], bytes: &[u8], sha: &str) -> Result<Vec<Tensor<f32>>> {
    if sha256(bytes) != sha {
        return Err(Error::format(path, "content hash does not match the manifest"));
    }
    let mut pos = 0usize;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        if e.offset != pos {
            return Err(Error::format(path, format!("'{}' starts at {} instead of {pos}", e.name, e.offset)));
        }
        if e.length != 4 * n {
            return Err(Error::format(path, format!("'{}' has length {} for {n} values", e.name, e.length)));
        }
        let end = pos + e.length;
        let chunk = bytes
            .get(pos..end)
            .ok_or_else(|| Error::format(path, format!("'{}' runs past the end of the file", e.name)))?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
            .collect();
        out.push(Tensor::from_vec(&e.shape, data).map_err(|err| Error::format(path, err.to_string()))?);
        pos = end;
    }
    if pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes a checkpoint into a new directory. An existing checkpoint is
/// never overwritten.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        return Err(Error::InvalidArgument(format!(
            "{} already holds a checkpoint",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = &ckpt.model;
    let params = model.params();
    let by_name: BTreeMap<&str, &Param> = params.iter().map(|p| (p.name.as_str(), p)).collect();

    let mut weights = Packed::new();
    for p in params {
        weights.push(p.name.clone(), p.owner, p.trainable, &p.value);
    }
    write(&dir.join(WEIGHTS_FILE), &weights.bytes)?;

    let optimizer = match &ckpt.optimizer {
        Some(adam) => {
            let mut packed = Packed::new();
            for (name, m) in &adam.moments {
                let p = by_name
                    .get(name.as_str())
                    .ok_or_else(|| Error::InvalidArgument(format!("optimizer state for unknown tensor '{name}'")))?;
                packed.push(format!("{name}.m"), p.owner, p.trainable, &m.m);
                packed.push(format!("{name}.v"), p.owner, p.trainable, &m.v);
            }
            write(&dir.join(OPTIMIZER_FILE), &packed.bytes)?;
            Some(OptimizerTable {
                step: adam.step,
                sha256: packed.sha(),
                tensors: packed.entries,
            })
        }
        None => None,
    };

    let ewc = if ckpt.ewc.is_empty() {
        None
    } else {
        let mut packed = Packed::new();
        for (k, state) in ckpt.ewc.iter().enumerate() {
            for (name, a) in &state.anchors {
                let p = by_name
                    .get(name.as_str())
                    .ok_or_else(|| Error::InvalidArgument(format!("consolidation anchor for unknown tensor '{name}'")))?;
                packed.push(format!("{k}/{name}.theta_star"), p.owner, p.trainable, &a.theta_star);
                packed.push(format!("{k}/{name}.fisher"), p.owner, p.trainable, &a.fisher);
            }
        }
        write(&dir.join(EWC_FILE), &packed.bytes)?;
        Some(EwcTable {
            lambdas: ckpt.ewc.iter().map(|s| s.lambda).collect(),
            sha256: packed.sha(),
            tensors: packed.entries,
        })
    };

    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config_hash: ckpt.config_hash.clone(),
        stage: ckpt.stage,
        arch: model.arch().clone(),
        policy: model.policy(),
        scope: model.scope(),
        seed: model.seed(),
        frozen: model.is_frozen(),
        domains: model.domains().to_vec(),
        weights_sha256: weights.sha(),
        tensors: weights.entries,
        optimizer,
        ewc,
        report: ckpt.report.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write(&manifest_path, &json)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = read(&path)?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &path,
            format!("checkpoint version {} is not {CHECKPOINT_VERSION}", manifest.version),
        ));
    }
    Ok(manifest)
}

/// Reads and fully validates a checkpoint; nothing is returned unless every
/// file matches its manifest.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m = read_manifest(dir)?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let values = unpack(&weights_path, &m.tensors, &read(&weights_path)?, &m.weights_sha256)?;
    let params = m
        .tensors
        .iter()
        .zip(values)
        .map(|(e, value)| {
            let (owner, level, role) = parse_param_name(&e.name)
                .ok_or_else(|| Error::format(&weights_path, format!("unknown tensor name '{}'", e.name)))?;
            if owner != e.owner {
                return Err(Error::format(&weights_path, format!("owner of '{}' disagrees with its name", e.name)));
            }
            Ok(Param {
                name: e.name.clone(),
                owner,
                level,
                role,
                trainable: e.trainable,
                value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = NcadaptModel::from_parts(m.arch.clone(), m.policy, m.scope, m.seed, m.frozen, m.domains.clone(), params)
        .map_err(|e| Error::format(&weights_path, e.to_string()))?;

    let optimizer = match &m.optimizer {
        Some(table) => {
            let path = dir.join(OPTIMIZER_FILE);
            let values = unpack(&path, &table.tensors, &read(&path)?, &table.sha256)?;
            let mut moments = BTreeMap::new();
            for (pair, vals) in table.tensors.chunks(2).zip(values.chunks(2)) {
                let name = pair[0].name.strip_suffix(".m");
                let ok = pair.len() == 2 && name.is_some() && pair[1].name.strip_suffix(".v") == name;
                if !ok {
                    return Err(Error::format(&path, format!("unpaired moment entry '{}'", pair[0].name)));
                }
                moments.insert(
                    name.expect("checked").to_string(),
                    Moments {
                        m: vals[0].clone(),
                        v: vals[1].clone(),
                    },
                );
            }
            Some(AdamState {
                step: table.step,
                moments,
            })
        }
        None => None,
    };

    let mut ewc = Vec::new();
    if let Some(table) = &m.ewc {
        let path = dir.join(EWC_FILE);
        let values = unpack(&path, &table.tensors, &read(&path)?, &table.sha256)?;
        ewc = table
            .lambdas
            .iter()
            .map(|&lambda| EwcState {
                lambda,
                anchors: BTreeMap::new(),
            })
            .collect();
        for (pair, vals) in table.tensors.chunks(2).zip(values.chunks(2)) {
            let parsed = pair[0].name.split_once('/').and_then(|(k, rest)| {
                let name = rest.strip_suffix(".theta_star")?;
                let second = pair.get(1)?.name.as_str();
                (second == format!("{k}/{name}.fisher")).then_some((k.parse::<usize>().ok()?, name))
            });
            let Some((k, name)) = parsed.filter(|(k, _)| *k < ewc.len()) else {
                return Err(Error::format(&path, format!("malformed anchor entry '{}'", pair[0].name)));
            };
            ewc[k].anchors.insert(
                name.to_string(),
                EwcAnchor {
                    theta_star: vals[0].clone(),
                    fisher: vals[1].clone(),
                },
            );
        }
    }

    Ok(Checkpoint {
        model,
        stage: m.stage,
        config_hash: m.config_hash,
        optimizer,
        ewc,
        report: m.report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::ParamFilter;

    fn model() -> NcadaptModel {
        let arch = ArchConfig {
            hidden: 8,
            ..ArchConfig::default_2d()
        };
        let mut m = NcadaptModel::new(arch, FreezePolicy::Ncadapt, PerceptionScope::Shared, 5).unwrap();
        m.add_domain("a").unwrap();
        m.apply_freeze_policy(FreezePolicy::Ncadapt).unwrap();
        m.add_domain("b").unwrap();
        m
    }

    #[test]
    fn name_parsing_inverts_naming() {
        for p in model().params() {
            assert_eq!(parse_param_name(&p.name), Some((p.owner, p.level, p.role)), "{}", p.name);
        }
        for bad in ["level0", "level0.kern", "domain0.level0.kernel", "x.level0.bias", "level0.bias.x", "shared.level0.kernel"] {
            assert_eq!(parse_param_name(bad), None, "{bad}");
        }
    }

    #[test]
    fn round_trip_without_optional_parts() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint {
            model: model(),
            stage: 2,
            config_hash: "h".into(),
            optimizer: None,
            ewc: Vec::new(),
            report: None,
        };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.model.count_params(ParamFilter::Trainable), ckpt.model.count_params(ParamFilter::Trainable));
        assert!(!dir.path().join(OPTIMIZER_FILE).exists());
        assert!(save_checkpoint(dir.path(), &ckpt).is_err(), "checkpoints are immutable");
    }
}
