use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{read_bag, PatchBag};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub path: PathBuf,
    pub label: u32,
    pub split: Split,
}

/// Slide list with labels and split tags. Relative paths resolve against
/// the directory holding the manifest file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            base_dir: base_dir.into(),
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.slide_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate slide_id {:?}",
                    e.slide_id
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["slide_id", "path", "label", "split"] {
            return Err(Error::Manifest(format!(
                "{}: header must be slide_id,path,label,split",
                path.display()
            )));
        }
        let entries = reader
            .deserialize::<ManifestEntry>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::new(entries, base_dir)?;
        for e in &m.entries {
            let p = m.resolve(e);
            if !p.is_file() {
                return Err(Error::Manifest(format!(
                    "slide {:?}: path {} does not exist",
                    e.slide_id,
                    p.display()
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Reads every bag of a split. The manifest label wins over the header
    /// label; a disagreement is logged.
    pub fn load_split<T: Scalar>(&self, split: Split) -> Result<Vec<PatchBag<T>>> {
        self.split(split)
            .map(|e| {
                let mut bag = read_bag::<T>(self.resolve(e))?;
                if bag.label != e.label {
                    log::warn!(
                        "slide {}: header label {} overridden by manifest label {}",
                        e.slide_id,
                        bag.label,
                        e.label
                    );
                    bag.label = e.label;
                }
                bag.slide_id = e.slide_id.clone();
                Ok(bag)
            })
            .collect()
    }
}
