//! Paired-tile dataset manifests.
//!
//! Layout on disk: `<root>/<split>A/*.png` holds H&E tiles and
//! `<root>/<split>B/*.png` the IHC tiles, paired by identical filename.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub he: PathBuf,
    pub ihc: PathBuf,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

fn png_names(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("png"))
            .unwrap_or(false);
        if path.is_file() && is_png {
            let name = entry.file_name().to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

/// Pairs `<split>A` and `<split>B` tiles by filename in lexicographic order.
///
/// Every file is probed for a readable PNG header so that a corrupt tile
/// fails here rather than mid-training.
pub fn load_pairs(root: &Path, split: Split) -> Result<DatasetManifest> {
    let a_dir = root.join(format!("{split}A"));
    let b_dir = root.join(format!("{split}B"));
    let a = png_names(&a_dir)?;
    let b = png_names(&b_dir)?;

    if let Some(orphan) = a.keys().find(|k| !b.contains_key(*k)) {
        return Err(Error::UnpairedTile(orphan.clone()));
    }
    if let Some(orphan) = b.keys().find(|k| !a.contains_key(*k)) {
        return Err(Error::UnpairedTile(orphan.clone()));
    }

    let mut entries = Vec::with_capacity(a.len());
    for (name, he) in a {
        let ihc = b[&name].clone();
        for p in [&he, &ihc] {
            image::image_dimensions(p).map_err(|e| Error::UnreadableImage {
                path: p.clone(),
                reason: e.to_string(),
            })?;
        }
        let id = Path::new(&name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(name.clone());
        entries.push(ManifestEntry { he, ihc, id });
    }
    let manifest = DatasetManifest { entries, split };
    manifest.validate()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate source id `{}` in {} split", e.id, self.split)));
            }
        }
        Ok(())
    }

    /// JSON lines, one `{"he", "ihc", "id"}` object per pair.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path, split: Split) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(e);
        }
        let m = Self { entries, split };
        m.validate()?;
        Ok(m)
    }
}
