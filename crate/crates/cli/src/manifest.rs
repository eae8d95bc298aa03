//! Document manifests: one JSON object per line.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => bail!("unknown split `{other}` (train, test)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub path: PathBuf,
    pub doc_id: String,
    pub writer_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

impl Manifest {
    /// Parses JSONL; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut entry: Entry =
                serde_json::from_str(line).with_context(|| format!("manifest line {}", n + 1))?;
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
            entries.push(entry);
        }
        let manifest = Self { entries };
        manifest.check_unique()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("entry serializes") + "\n").collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        writer_retrieval::container::write_atomic(path, self.to_jsonl().as_bytes())?;
        Ok(())
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.doc_id.is_empty() || e.writer_id.is_empty() {
                bail!("manifest entry for {} has an empty doc_id or writer_id", e.path.display());
            }
            if !seen.insert(e.doc_id.as_str()) {
                bail!("duplicate doc_id `{}` in manifest", e.doc_id);
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&Entry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Content hash of the entries of `split`, independent of file location.
    pub fn hash(&self, split: Split) -> String {
        let mut h = Sha256::new();
        for e in self.split(split) {
            h.update(serde_json::to_string(e).expect("entry serializes").as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Builds entries from files named `<writer>-<rest>.<ext>` in `dir`, sorted by name.
    pub fn import_dir(dir: &Path, split: Split) -> Result<Self> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        let mut entries = Vec::new();
        for path in names {
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let Some((writer, rest)) = stem.split_once('-') else {
                log::warn!("skipping {}: name is not `<writer>-<doc>`", path.display());
                continue;
            };
            if writer.is_empty() || rest.is_empty() {
                log::warn!("skipping {}: name is not `<writer>-<doc>`", path.display());
                continue;
            }
            entries.push(Entry { path: path.clone(), doc_id: stem.to_string(), writer_id: writer.to_string(), split });
        }
        let manifest = Self { entries };
        manifest.check_unique()?;
        Ok(manifest)
    }
}
