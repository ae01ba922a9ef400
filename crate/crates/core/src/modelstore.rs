//! Durable per-(vm, metric) model storage.
//!
//! Layout: `<root>/<vm_id>/<metric>.model.json`, one pretty-printed JSON
//! document per key. The document's `checksum` is the SHA-256 (hex) of the
//! compact JSON serialisation of the same document with `checksum` set to the
//! empty string. Writes go to a temporary sibling, are fsynced, then renamed
//! over the target, so a crash never leaves a half-written model in place.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::VmTrainingState;
use crate::error::{Error, Result};
use crate::occ::{ClassProbabilityEstimator, DecisionRule, GaussianDensity, OccConfig, OccModel};
use crate::series::Metric;
use crate::wtsa::{FeatureBounds, FeatureMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelKey {
    pub vm_id: String,
    pub metric: Metric,
    pub mode: FeatureMode,
}

impl ModelKey {
    pub fn new(vm_id: impl Into<String>, metric: Metric, mode: FeatureMode) -> Self {
        Self {
            vm_id: vm_id.into(),
            metric,
            mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub key: ModelKey,
    pub model: OccModel,
    pub state: Option<VmTrainingState>,
    /// Seconds since the epoch.
    pub created_at: i64,
    /// Assigned by the store on save.
    pub model_version: u64,
}

impl ModelRecord {
    pub fn new(key: ModelKey, model: OccModel, state: Option<VmTrainingState>) -> Self {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0);
        Self {
            key,
            model,
            state,
            created_at,
            model_version: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GaussianParameters {
    reference: GaussianDensity,
    estimator: ClassProbabilityEstimator,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDocument {
    schema_version: u32,
    vm_id: String,
    metric: Metric,
    mode: FeatureMode,
    version: u64,
    created_at: i64,
    bounds: Option<FeatureBounds>,
    gaussian: GaussianParameters,
    prior: f64,
    decision_rule: DecisionRule,
    threshold: f64,
    seed: u64,
    config: OccConfig,
    state: Option<VmTrainingState>,
    checksum: String,
}

impl ModelDocument {
    fn digest(&self) -> Result<String> {
        let mut unsigned = self.clone();
        unsigned.checksum.clear();
        let bytes = serde_json::to_vec(&unsigned)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    fn into_record(self) -> ModelRecord {
        ModelRecord {
            key: ModelKey::new(self.vm_id, self.metric, self.mode),
            model: OccModel {
                reference: self.gaussian.reference,
                estimator: self.gaussian.estimator,
                target_prior: self.prior,
                decision_rule: self.decision_rule,
                threshold: self.threshold,
                bounds: self.bounds,
                seed: self.seed,
                config: self.config,
            },
            state: self.state,
            created_at: self.created_at,
            model_version: self.version,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelStore {
    root: PathBuf,
}

impl ModelStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, vm_id: &str, metric: Metric) -> Result<PathBuf> {
        if vm_id.is_empty() || vm_id == "." || vm_id == ".." || vm_id.contains(['/', '\\', '\0']) {
            return Err(Error::InvalidInput(format!(
                "vm id '{vm_id}' cannot be used as a directory name"
            )));
        }
        Ok(self
            .root
            .join(vm_id)
            .join(format!("{}.model.json", metric.as_str())))
    }

    /// Persists `record` atomically and returns its new version, one above
    /// whatever is currently stored for the same (vm, metric).
    pub fn save(&self, record: &ModelRecord) -> Result<u64> {
        let path = self.path_for(&record.key.vm_id, record.key.metric)?;
        let previous = match read_document(&path) {
            Ok(doc) => doc.version,
            Err(Error::NotFound(_)) => 0,
            Err(e) => return Err(e),
        };
        let version = previous + 1;
        let tmp = self.stage(record, version)?;
        fs::rename(&tmp, &path)?;
        if let Some(dir) = path.parent() {
            // directory fsync is best-effort; not every platform allows it
            if let Ok(d) = File::open(dir) {
                let _ = d.sync_all();
            }
        }
        Ok(version)
    }

    /// Writes and fsyncs the temporary file for `record` without publishing it.
    pub(crate) fn stage(&self, record: &ModelRecord, version: u64) -> Result<PathBuf> {
        let path = self.path_for(&record.key.vm_id, record.key.metric)?;
        let dir = path.parent().expect("model path has a parent");
        fs::create_dir_all(dir)?;

        let m = &record.model;
        let mut doc = ModelDocument {
            schema_version: SCHEMA_VERSION,
            vm_id: record.key.vm_id.clone(),
            metric: record.key.metric,
            mode: record.key.mode,
            version,
            created_at: record.created_at,
            bounds: m.bounds.clone(),
            gaussian: GaussianParameters {
                reference: m.reference.clone(),
                estimator: m.estimator.clone(),
            },
            prior: m.target_prior,
            decision_rule: m.decision_rule,
            threshold: m.threshold,
            seed: m.seed,
            config: m.config.clone(),
            state: record.state.clone(),
            checksum: String::new(),
        };
        doc.checksum = doc.digest()?;

        let file_name = path
            .file_name()
            .and_then(|n| n.to_str())
            .expect("model file name is utf-8");
        let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
        let mut f = File::create(&tmp)?;
        serde_json::to_writer_pretty(&mut f, &doc)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
        Ok(tmp)
    }

    /// Latest record for `key`. A stored model trained under a different
    /// feature mode counts as not found.
    pub fn load(&self, key: &ModelKey) -> Result<ModelRecord> {
        let path = self.path_for(&key.vm_id, key.metric)?;
        let doc = read_document(&path)?;
        if doc.mode != key.mode {
            return Err(Error::NotFound(format!(
                "{} holds a {} model, not {}",
                path.display(),
                doc.mode,
                key.mode
            )));
        }
        Ok(doc.into_record())
    }
}

fn read_document(path: &Path) -> Result<ModelDocument> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::NotFound(path.display().to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let integrity = |reason: String| Error::Integrity {
        path: path.display().to_string(),
        reason,
    };
    let doc: ModelDocument = serde_json::from_slice(&bytes)
        .map_err(|e| integrity(format!("unreadable document: {e}")))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(integrity(format!(
            "unsupported schema version {}",
            doc.schema_version
        )));
    }
    let expected = doc.digest()?;
    if expected != doc.checksum {
        return Err(integrity(format!(
            "checksum mismatch (stored {}, computed {expected})",
            doc.checksum
        )));
    }
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> OccModel {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i % 5) as f64 * 0.1, (i % 3) as f64 * 0.2])
            .collect();
        OccModel::fit(&pts, &OccConfig::default(), seed).unwrap()
    }

    #[test]
    fn interrupted_write_leaves_previous_version_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::new(dir.path());
        let key = ModelKey::new("vm1", Metric::CpuPercent, FeatureMode::AvgSd);
        let first = ModelRecord::new(key.clone(), model(1), None);
        assert_eq!(store.save(&first).unwrap(), 1);

        // crash between temp write and rename
        let tmp = store
            .stage(&ModelRecord::new(key.clone(), model(2), None), 2)
            .unwrap();
        assert!(tmp.exists());

        let loaded = store.load(&key).unwrap();
        assert_eq!(loaded.model_version, 1);
        assert_eq!(loaded.model, first.model);

        // the next completed save supersedes the stale temp file
        assert_eq!(
            store
                .save(&ModelRecord::new(key.clone(), model(3), None))
                .unwrap(),
            2
        );
        assert_eq!(store.load(&key).unwrap().model.seed, 3);
    }

    #[test]
    fn rejects_path_like_vm_ids() {
        let store = ModelStore::new("/tmp/unused");
        assert!(store.path_for("../etc", Metric::CpuPercent).is_err());
        assert!(store.path_for("..", Metric::CpuPercent).is_err());
        assert!(store.path_for("vm-1", Metric::NetKbps).is_ok());
    }
}
