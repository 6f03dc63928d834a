//! Checkpoints: `manifest.json` plus `tensors.bin`, a blob of little-endian
//! f32 values concatenated in manifest order.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use fuseg_core::scheduler::{TrainState, Trainer};
use fuseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

const SEG: &str = "seg/";
const FUSION: &str = "fusion/";
const ADAM_SEG: &str = "adam_seg/";
const ADAM_FUSION: &str = "adam_fusion/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub created: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub round: usize,
    pub tensors: Vec<TensorEntry>,
    pub scalars: BTreeMap<String, f64>,
    pub state: TrainState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub data: Vec<Vec<f32>>,
}

/// Creation stamp: `SOURCE_DATE_EPOCH` when set, else the current time.
pub fn timestamp() -> String {
    let at = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<i64>().ok())
        .and_then(|s| chrono::DateTime::from_timestamp(s, 0))
        .unwrap_or_else(chrono::Utc::now);
    at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Checkpoint {
    /// Captures parameters, optimizer moments and scheduler state.
    pub fn capture(trainer: &Trainer, config: serde_json::Value) -> Result<Self> {
        let mut named = Vec::new();
        let groups = [
            (SEG, trainer.model.seg_params.export()?),
            (FUSION, trainer.model.fusion_params.export()?),
            (ADAM_SEG, trainer.adam_seg.export()?),
            (ADAM_FUSION, trainer.adam_fusion.export()?),
        ];
        for (prefix, tensors) in groups {
            for (name, shape, data) in tensors {
                named.push((format!("{prefix}{name}"), shape, data));
            }
        }
        let mut scalars = BTreeMap::new();
        scalars.insert("adam_seg.step".into(), trainer.adam_seg.steps_taken() as f64);
        scalars.insert("adam_fusion.step".into(), trainer.adam_fusion.steps_taken() as f64);
        let state = trainer.state.clone();
        Ok(Self::from_parts(
            config,
            trainer.settings().seed,
            state.round,
            named,
            scalars,
            state,
        ))
    }

    pub fn from_parts(
        config: serde_json::Value,
        seed: u64,
        round: usize,
        named: Vec<(String, Vec<usize>, Vec<f32>)>,
        scalars: BTreeMap<String, f64>,
        state: TrainState,
    ) -> Self {
        let mut tensors = Vec::with_capacity(named.len());
        let mut data = Vec::with_capacity(named.len());
        let mut offset = 0u64;
        for (name, shape, values) in named {
            tensors.push(TensorEntry {
                name,
                shape,
                dtype: "f32".into(),
                offset,
            });
            offset += 4 * values.len() as u64;
            data.push(values);
        }
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                created: timestamp(),
                config,
                seed,
                round,
                tensors,
                scalars,
                state,
            },
            data,
        }
    }

    /// Restores everything [`Checkpoint::capture`] recorded. Names and shapes
    /// must match the trainer's model.
    pub fn restore(&self, trainer: &mut Trainer) -> Result<()> {
        let table = self.table();
        let expected = trainer.model.seg_params.named_vars().len() + trainer.model.fusion_params.named_vars().len();
        let stored = table
            .keys()
            .filter(|k| k.starts_with(SEG) || k.starts_with(FUSION))
            .count();
        if stored != expected {
            return Err(Error::CorruptBlob(format!(
                "{stored} stored parameters, model has {expected}"
            )));
        }
        for (prefix, params) in [(SEG, &trainer.model.seg_params), (FUSION, &trainer.model.fusion_params)] {
            for (name, _) in params.named_vars() {
                let (shape, data) = table
                    .get(format!("{prefix}{name}").as_str())
                    .ok_or_else(|| Error::CorruptBlob(format!("parameter {prefix}{name} is missing")))?;
                params.load(&name, shape, data)?;
            }
        }
        for (prefix, key, adam) in [
            (ADAM_SEG, "adam_seg.step", &mut trainer.adam_seg),
            (ADAM_FUSION, "adam_fusion.step", &mut trainer.adam_fusion),
        ] {
            let step = *self
                .manifest
                .scalars
                .get(key)
                .ok_or_else(|| Error::CorruptBlob(format!("scalar {key} is missing")))?;
            adam.import(step as u64, |name| {
                table
                    .get(format!("{prefix}{name}").as_str())
                    .map(|(s, d)| (s.to_vec(), d.to_vec()))
            })?;
        }
        trainer.state = self.manifest.state.clone();
        Ok(())
    }

    fn table(&self) -> HashMap<&str, (&[usize], &[f32])> {
        self.manifest
            .tensors
            .iter()
            .zip(&self.data)
            .map(|(e, d)| (e.name.as_str(), (e.shape.as_slice(), d.as_slice())))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| self.data[i].as_slice())
    }

    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.iter().map(|d| 4 * d.len()).sum());
        for d in &self.data {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifests always serialize")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let blob = dir.join(BLOB_FILE);
        std::fs::write(&blob, self.blob()).map_err(|e| io_err(&blob, e))?;
        let manifest = dir.join(MANIFEST_FILE);
        std::fs::write(&manifest, self.manifest_json()).map_err(|e| io_err(&manifest, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST_FILE);
        let text = std::fs::read(&manifest).map_err(|e| io_err(&manifest, e))?;
        let blob_path = dir.join(BLOB_FILE);
        let blob = std::fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
        Self::decode(&text, &blob)
    }

    /// Parses a manifest and its blob.
    pub fn decode(manifest: &[u8], blob: &[u8]) -> Result<Self> {
        let probe: serde_json::Value =
            serde_json::from_slice(manifest).map_err(|e| Error::CorruptBlob(format!("manifest: {e}")))?;
        let version = probe
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CorruptBlob("manifest has no format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest =
            serde_json::from_value(probe).map_err(|e| Error::CorruptBlob(format!("manifest: {e}")))?;
        let mut expected = 0u64;
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::CorruptBlob(format!("tensor {} has dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected {
                return Err(Error::CorruptBlob(format!(
                    "tensor {} starts at {}, expected {expected}",
                    e.name, e.offset
                )));
            }
            let bytes = e
                .shape
                .iter()
                .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::CorruptBlob(format!("tensor {} is too large", e.name)))?;
            expected = expected
                .checked_add(bytes)
                .ok_or_else(|| Error::CorruptBlob("tensor table overflows".into()))?;
        }
        if expected != blob.len() as u64 {
            return Err(Error::CorruptBlob(format!(
                "blob holds {} bytes, tensor table needs {expected}",
                blob.len()
            )));
        }
        let data = manifest
            .tensors
            .iter()
            .map(|e| {
                let start = e.offset as usize;
                blob[start..start + 4 * e.len()]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect()
            })
            .collect();
        Ok(Self { manifest, data })
    }
}

/// Directory of the checkpoint written after `round` (1-based).
pub fn round_dir(run: &Path, round: usize) -> PathBuf {
    run.join(format!("round_{round}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fuseg_core::scheduler::RateHistory;

    fn state() -> TrainState {
        TrainState {
            round: 1,
            iteration: 12,
            seg_steps: 8,
            fusion_steps: 4,
            history: RateHistory::from_values(vec![vec![0.1f64.sqrt(), 1.0 / 3.0], vec![2.5, 0.7]]).unwrap(),
            lambdas: vec![0.4, 0.6],
            weight_log: Vec::new(),
        }
    }

    fn sample() -> Checkpoint {
        let named = vec![
            (
                "seg/a".to_string(),
                vec![2, 3],
                vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25],
            ),
            ("fusion/b".to_string(), vec![4], vec![0.1, 0.2, 0.3, f32::MAX]),
            ("empty".to_string(), vec![0, 5], vec![]),
        ];
        let mut scalars = BTreeMap::new();
        scalars.insert("adam_seg.step".into(), 8.0);
        Checkpoint::from_parts(serde_json::json!({"seed": 3}), 3, 1, named, scalars, state())
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        ck.save(&dir.path().join("a")).unwrap();
        let back = Checkpoint::load(&dir.path().join("a")).unwrap();
        assert_eq!(back, ck);
        back.save(&dir.path().join("b")).unwrap();
        for f in [MANIFEST_FILE, BLOB_FILE] {
            assert_eq!(
                std::fs::read(dir.path().join("a").join(f)).unwrap(),
                std::fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
    }

    #[test]
    fn offsets_follow_manifest_order() {
        let ck = sample();
        let offsets: Vec<u64> = ck.manifest.tensors.iter().map(|e| e.offset).collect();
        assert_eq!(offsets, vec![0, 24, 40]);
        assert_eq!(ck.blob().len(), 40);
        assert_eq!(ck.get("fusion/b").unwrap()[3], f32::MAX);
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let ck = sample();
        let blob = ck.blob();
        let m = ck.manifest_json();
        assert!(matches!(
            Checkpoint::decode(m.as_bytes(), &blob[..blob.len() - 1]),
            Err(Error::CorruptBlob(_))
        ));
        let mut long = blob.clone();
        long.push(0);
        assert!(matches!(
            Checkpoint::decode(m.as_bytes(), &long),
            Err(Error::CorruptBlob(_))
        ));
    }

    #[test]
    fn foreign_version_is_rejected() {
        let ck = sample();
        let m = ck
            .manifest_json()
            .replace("\"format_version\": 1", "\"format_version\": 7");
        assert!(matches!(
            Checkpoint::decode(m.as_bytes(), &ck.blob()),
            Err(Error::VersionMismatch {
                found: 7,
                expected: FORMAT_VERSION
            })
        ));
    }

    #[test]
    fn garbage_manifest_is_corrupt() {
        assert!(matches!(Checkpoint::decode(b"{", &[]), Err(Error::CorruptBlob(_))));
        assert!(matches!(Checkpoint::decode(b"{}", &[]), Err(Error::CorruptBlob(_))));
    }

    #[test]
    fn source_date_epoch_fixes_the_stamp() {
        // only asserts the format: the variable is process-global
        let t = timestamp();
        assert!(chrono::DateTime::parse_from_rfc3339(&t).is_ok(), "{t}");
    }
}
