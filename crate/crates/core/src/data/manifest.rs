use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{channels::check_unique, ChannelLabel, DomainId, EegTrial, Task};
use crate::align::AlignedLayout;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One trial entry of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    /// Payload location relative to the dataset directory.
    pub path: PathBuf,
    /// Key into [`DatasetManifest::channel_sets`].
    pub channels: String,
    pub label: usize,
    pub domain_id: DomainId,
    pub n_samples: usize,
}

/// Dataset descriptor stored as `manifest.json` next to the raw trial payloads.
///
/// Every payload is headerless little-endian `f32`, row-major `channels x samples`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub task: Task,
    pub rate_hz: f64,
    /// Multiplier taking stored values to 0.1 mV units.
    #[serde(default = "one")]
    pub unit_scale: f64,
    pub class_names: Vec<String>,
    pub channel_sets: BTreeMap<String, Vec<ChannelLabel>>,
    pub trials: Vec<TrialRecord>,
    /// Present on datasets produced by the alignment stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<AlignedLayout>,
    #[serde(skip)]
    pub root: PathBuf,
}

fn one() -> f64 {
    1.0
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels_of(&self, index: usize) -> &[ChannelLabel] {
        &self.channel_sets[&self.trials[index].channels]
    }

    pub fn trial_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.trials[index].path)
    }

    /// Checks every invariant, including payload sizes on disk.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::data("name", "empty dataset name"));
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::data("rate_hz", format!("must be positive, got {}", self.rate_hz)));
        }
        if !(self.unit_scale > 0.0 && self.unit_scale.is_finite()) {
            return Err(Error::data("unit_scale", "must be positive"));
        }
        if self.class_names.is_empty() {
            return Err(Error::data("class_names", "need at least one class"));
        }
        for (key, set) in &self.channel_sets {
            if set.is_empty() {
                return Err(Error::data(format!("channel_sets.{key}"), "empty channel list"));
            }
            check_unique(set).map_err(|m| Error::data(format!("channel_sets.{key}"), m))?;
        }
        let c = self.n_classes();
        for (i, t) in self.trials.iter().enumerate() {
            let field = |f: &str| format!("trials[{i}].{f}");
            if t.label >= c {
                return Err(Error::data(
                    field("label"),
                    format!("label out of range: {} with {} classes", t.label, c),
                ));
            }
            let Some(set) = self.channel_sets.get(&t.channels) else {
                return Err(Error::data(
                    field("channels"),
                    format!("unknown channel set {:?}", t.channels),
                ));
            };
            if t.n_samples == 0 {
                return Err(Error::data(field("n_samples"), "must be positive"));
            }
            let path = self.root.join(&t.path);
            let meta = fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
            let expected = (set.len() * t.n_samples * 4) as u64;
            if meta.len() != expected {
                return Err(Error::data(
                    field("path"),
                    format!(
                        "size mismatch: {} holds {} bytes, expected {}",
                        path.display(),
                        meta.len(),
                        expected
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Loads and validates a manifest. `path` may be the manifest file or its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: file.clone(),
        source,
    })?;
    m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate()?;
    Ok(m)
}

/// Reads one trial payload.
pub fn load_trial(manifest: &DatasetManifest, index: usize) -> Result<EegTrial> {
    if index >= manifest.trials.len() {
        return Err(Error::arg(format!(
            "index out of range: {index} with {} trials",
            manifest.trials.len()
        )));
    }
    let rec = &manifest.trials[index];
    let channels = manifest.channels_of(index).to_vec();
    let path = manifest.trial_path(index);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = channels.len() * rec.n_samples * 4;
    if bytes.len() != expected {
        return Err(Error::data(
            format!("trials[{index}].path"),
            format!("size mismatch: {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::data(
            format!("trials[{index}]"),
            format!("non-finite sample at offset {pos}"),
        ));
    }
    EegTrial::new(data, channels, manifest.rate_hz, rec.label, rec.domain_id.clone())
}

/// Loads every trial in manifest order.
pub fn load_all_trials(manifest: &DatasetManifest) -> Result<Vec<EegTrial>> {
    (0..manifest.trials.len()).map(|i| load_trial(manifest, i)).collect()
}

/// Streams trials into a new dataset directory and writes the manifest on `finish`.
pub struct DatasetWriter {
    dir: PathBuf,
    manifest: DatasetManifest,
}

impl DatasetWriter {
    pub fn create(
        dir: &Path,
        name: &str,
        task: Task,
        rate_hz: f64,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let trials_dir = dir.join("trials");
        fs::create_dir_all(&trials_dir).map_err(|e| Error::io(&trials_dir, e))?;
        Ok(DatasetWriter {
            dir: dir.to_path_buf(),
            manifest: DatasetManifest {
                name: name.to_string(),
                task,
                rate_hz,
                unit_scale: 1.0,
                class_names,
                channel_sets: BTreeMap::new(),
                trials: Vec::new(),
                layout: None,
                root: dir.to_path_buf(),
            },
        })
    }

    pub fn set_unit_scale(&mut self, scale: f64) {
        self.manifest.unit_scale = scale;
    }

    pub fn set_layout(&mut self, layout: AlignedLayout) {
        self.manifest.layout = Some(layout);
    }

    pub fn push(&mut self, trial: &EegTrial) -> Result<()> {
        if trial.rate_hz != self.manifest.rate_hz {
            return Err(Error::data(
                "rate_hz",
                format!("trial at {} Hz in a {} Hz dataset", trial.rate_hz, self.manifest.rate_hz),
            ));
        }
        if trial.label >= self.manifest.class_names.len() {
            return Err(Error::data("label", format!("label out of range: {}", trial.label)));
        }
        let set_key = match self
            .manifest
            .channel_sets
            .iter()
            .find(|(_, v)| **v == trial.channels)
        {
            Some((k, _)) => k.clone(),
            None => {
                let k = format!("set{}", self.manifest.channel_sets.len());
                self.manifest.channel_sets.insert(k.clone(), trial.channels.clone());
                k
            }
        };
        let rel = PathBuf::from("trials").join(format!("{:06}.f32", self.manifest.trials.len()));
        let path = self.dir.join(&rel);
        let mut buf = Vec::with_capacity(trial.data.len() * 4);
        for v in &trial.data {
            buf.write_all(&v.to_le_bytes()).expect("vec write");
        }
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        self.manifest.trials.push(TrialRecord {
            path: rel,
            channels: set_key,
            label: trial.label,
            domain_id: trial.domain_id.clone(),
            n_samples: trial.n_samples,
        });
        Ok(())
    }

    pub fn finish(self) -> Result<DatasetManifest> {
        self.manifest.save(&self.dir)?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::channel_list;

    fn write_toy(dir: &Path) -> DatasetManifest {
        let ch = channel_list(&["C3", "C4"]).unwrap();
        let mut w = DatasetWriter::create(dir, "toy", Task::Mi, 256.0, vec!["l".into(), "r".into()])
            .unwrap();
        for (i, label) in [0usize, 1, 0].into_iter().enumerate() {
            let t = EegTrial::new(
                vec![1.0, 2.0, 3.0, 4.0 + i as f32],
                ch.clone(),
                256.0,
                label,
                DomainId::new("toy", "s1", "1"),
            )
            .unwrap();
            w.push(&t).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_toy(dir.path());
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.trials.len(), 3);
        let t = load_trial(&m, 0).unwrap();
        assert_eq!(t.data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.n_samples, 2);
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_toy(dir.path());
        let p = m.trial_path(1);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_manifest(dir.path()).unwrap_err().to_string();
        assert!(err.contains("size mismatch"), "{err}");
    }

    #[test]
    fn label_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_toy(dir.path());
        m.trials[2].label = 2;
        m.save(dir.path()).unwrap();
        let err = load_manifest(dir.path()).unwrap_err().to_string();
        assert!(err.contains("label out of range"), "{err}");
        assert!(err.contains("trials[2].label"), "{err}");
    }

    #[test]
    fn nan_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_toy(dir.path());
        let mut bytes = Vec::new();
        for v in [1.0f32, f32::NAN, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(m.trial_path(0), bytes).unwrap();
        let m = load_manifest(dir.path()).unwrap();
        let err = load_trial(&m, 0).unwrap_err().to_string();
        assert!(err.contains("non-finite sample"), "{err}");
    }

    #[test]
    fn index_past_end() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_toy(dir.path());
        let err = load_trial(&m, 3).unwrap_err().to_string();
        assert!(err.contains("index out of range"), "{err}");
    }

    #[test]
    fn missing_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Io { .. })));
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Json { .. })));
    }
}
