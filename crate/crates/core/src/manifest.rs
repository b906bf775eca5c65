//! Dataset manifests (CSV) and the in-memory labelled dataset built from them.
//!
//! Manifest header: `path,label,subject_id,noise_level,split`. Relative paths
//! resolve against the manifest's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_volume, write_volume};
use crate::volume::Volume;

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u8,
    pub subject_id: String,
    pub noise_level: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest { entries };
        m.validate()?;
        Ok(m)
    }

    /// Subject to split assignment; fails if any subject spans two splits.
    pub fn subject_splits(&self) -> Result<BTreeMap<String, Split>> {
        let mut splits = BTreeMap::new();
        for e in &self.entries {
            match splits.insert(e.subject_id.clone(), e.split) {
                Some(prev) if prev != e.split => {
                    return Err(Error::Manifest(format!(
                        "subject '{}' appears in both {prev} and {} splits",
                        e.subject_id, e.split
                    )))
                }
                _ => {}
            }
        }
        Ok(splits)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.label > 1 {
                return Err(Error::Manifest(format!(
                    "label {} for {} is not binary",
                    e.label,
                    e.path.display()
                )));
            }
            if !(e.noise_level >= 0.0 && e.noise_level.is_finite()) {
                return Err(Error::Manifest(format!(
                    "noise level {} for {} must be non-negative",
                    e.noise_level,
                    e.path.display()
                )));
            }
        }
        self.subject_splits().map(|_| ())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if headers != vec!["path", "label", "subject_id", "noise_level", "split"] {
            return Err(Error::Manifest(format!(
                "{}: header must be path,label,subject_id,noise_level,split",
                path.display()
            )));
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut entries = Vec::new();
        for row in reader.deserialize() {
            let mut entry: ManifestEntry =
                row.map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
            entries.push(entry);
        }
        Self::new(entries)
    }

    /// Writes the manifest with paths made relative to `path`'s directory
    /// where possible.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        for e in &self.entries {
            let mut e = e.clone();
            if let Ok(rel) = e.path.strip_prefix(base) {
                e.path = rel.to_path_buf();
            }
            writer
                .serialize(&e)
                .map_err(|err| Error::Manifest(format!("{}: {err}", path.display())))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub volume: Volume,
    pub label: u8,
    pub subject_id: String,
    pub noise_level: f64,
    pub split: Split,
}

/// Labelled volumes held in memory, in manifest order.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    volume: read_volume(&e.path)?,
                    label: e.label,
                    subject_id: e.subject_id.clone(),
                    noise_level: e.noise_level,
                    split: e.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset { samples };
        ds.check_dims()?;
        Ok(ds)
    }

    /// Loads `<dir>/manifest.csv` or a manifest file given directly.
    pub fn load_dir(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        Self::load(&DatasetManifest::read(manifest)?)
    }

    /// Writes every volume as VOL1 under `dir` plus `dir/manifest.csv`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!(
                "{}_n{:03}_{:05}_y{}.vol",
                s.subject_id,
                (s.noise_level * 100.0).round() as u32,
                i,
                s.label
            );
            let path = dir.join(name);
            write_volume(&s.volume, &path)?;
            entries.push(ManifestEntry {
                path,
                label: s.label,
                subject_id: s.subject_id.clone(),
                noise_level: s.noise_level,
                split: s.split,
            });
        }
        let manifest = DatasetManifest::new(entries)?;
        manifest.write(dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }

    pub fn check_dims(&self) -> Result<()> {
        if let Some(first) = self.samples.first() {
            for s in &self.samples[1..] {
                first.volume.check_same_dims(&s.volume)?;
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Distinct noise levels present, ascending.
    pub fn noise_levels(&self) -> Vec<f64> {
        let mut levels: Vec<f64> = Vec::new();
        for s in &self.samples {
            if !levels.contains(&s.noise_level) {
                levels.push(s.noise_level);
            }
        }
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::new(
            self.samples
                .iter()
                .map(|s| ManifestEntry {
                    path: PathBuf::new(),
                    label: s.label,
                    subject_id: s.subject_id.clone(),
                    noise_level: s.noise_level,
                    split: s.split,
                })
                .collect(),
        )
    }
}
