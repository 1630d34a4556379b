use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::TagLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    /// A generated pool not yet split.
    All,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Position in the pool the entry was drawn from; stable across splits.
    pub index: usize,
    /// Path relative to the manifest's directory.
    pub image: PathBuf,
    pub tags: TagLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    split: Split,
    num_classes: usize,
    image_size: (usize, usize),
    seed: u64,
    len: usize,
}

/// A list of tagged images on disk, stored as one JSON header line followed
/// by one JSON line per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub num_classes: usize,
    pub image_size: (usize, usize),
    pub seed: u64,
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.mask.is_some())
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image)
    }

    pub fn mask_path(&self, entry: &ManifestEntry) -> Option<PathBuf> {
        entry.mask.as_ref().map(|m| self.root.join(m))
    }

    /// Checks labels against `num_classes` and the background convention.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            e.tags.validate()?;
            if e.tags.num_classes() != self.num_classes {
                return Err(Error::Invalid(format!(
                    "entry {} has {} classes, manifest declares {}",
                    e.index,
                    e.tags.num_classes(),
                    self.num_classes
                )));
            }
            if e.tags.y[self.num_classes - 1] <= 0.0 {
                return Err(Error::Invalid(format!("entry {} lacks the background tag", e.index)));
            }
        }
        Ok(())
    }

    /// Verifies that every referenced file exists.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            let img = self.image_path(e);
            if !img.is_file() {
                return Err(Error::Load {
                    path: img,
                    reason: "image listed in manifest does not exist".into(),
                });
            }
            if let Some(m) = self.mask_path(e) {
                if !m.is_file() {
                    return Err(Error::Load {
                        path: m,
                        reason: "mask listed in manifest does not exist".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let header = Header {
            split: self.split,
            num_classes: self.num_classes,
            image_size: self.image_size,
            seed: self.seed,
            len: self.entries.len(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes the manifest to `path`; entry paths stay relative to `root`.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; relative paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let bad = |reason: String| Error::Load {
            path: path.to_path_buf(),
            reason,
        };
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line.map_err(|e| Error::io(path, e))?)
                .map_err(|e| bad(format!("header: {e}")))?,
            None => return Err(bad("empty manifest".into())),
        };
        let mut entries = Vec::with_capacity(header.len);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?);
        }
        if entries.len() != header.len {
            return Err(bad(format!(
                "header announces {} entries, found {}",
                header.len,
                entries.len()
            )));
        }
        let m = Self {
            split: header.split,
            num_classes: header.num_classes,
            image_size: header.image_size,
            seed: header.seed,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    /// Copy restricted to `pick`, in that order.
    pub fn subset(&self, pick: &[usize], split: Split) -> Self {
        Self {
            split,
            entries: pick.iter().map(|&i| self.entries[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Entries with / without any foreground tag.
    pub fn populations(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.entries.len()).partition(|&i| self.entries[i].tags.has_foreground())
    }
}

/// True when no image path appears in both manifests.
pub fn disjoint(a: &DatasetManifest, b: &DatasetManifest) -> bool {
    let seen: HashSet<PathBuf> = a.entries.iter().map(|e| a.image_path(e)).collect();
    b.entries.iter().all(|e| !seen.contains(&b.image_path(e)))
}

/// Splits a pool into train/val with each population (foreground present or
/// absent) divided at `ratio`, rounding the train share to the nearest count.
pub fn stratified_split(
    pool: &DatasetManifest,
    ratio: f64,
    rng: &mut impl rand::Rng,
) -> Result<(DatasetManifest, DatasetManifest)> {
    use rand::seq::SliceRandom;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
    }
    let (mut pos, mut neg) = pool.populations();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for group in [&mut pos, &mut neg] {
        group.shuffle(rng);
        let n_train = (group.len() as f64 * ratio).round() as usize;
        train.extend_from_slice(&group[..n_train]);
        val.extend_from_slice(&group[n_train..]);
    }
    train.sort_by_key(|&i| pool.entries[i].index);
    val.sort_by_key(|&i| pool.entries[i].index);
    Ok((pool.subset(&train, Split::Train), pool.subset(&val, Split::Val)))
}
