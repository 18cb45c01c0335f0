//! JSON-lines manifests of volume-report samples and the in-memory corpus.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::read_volume;
use super::tokenizer::Vocab;
use super::volume::{Preprocess, Volume};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub volume_path: String,
    pub report_text: String,
    pub labels: BTreeMap<String, u8>,
    pub split: Split,
}

pub fn write_manifest(records: &[SampleRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: SampleRecord = serde_json::from_str(line).map_err(|e| {
            Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if r.labels.values().any(|&l| l > 1) {
            return Err(Error::Config(format!("sample `{}` has a label outside {{0,1}}", r.id)));
        }
        if !seen.insert(r.id.clone()) {
            return Err(Error::Config(format!("duplicate sample id `{}`", r.id)));
        }
        records.push(r);
    }
    Ok(records)
}

fn id_hash(id: &str) -> [u8; 32] {
    Sha256::digest(id.as_bytes()).into()
}

/// Deterministic 80/10/10 split: ids ranked by SHA-256, the first
/// `round(n/10)` go to test, the next `round(n/10)` to val, the rest to train.
pub fn assign_splits(ids: &[String]) -> Vec<Split> {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (id_hash(&ids[i]), ids[i].clone()));
    let tenth = (n as f64 / 10.0).round() as usize;
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < tenth {
            Split::Test
        } else if rank < 2 * tenth {
            Split::Val
        } else {
            Split::Train
        };
    }
    splits
}

/// A manifest with its volumes loaded and preprocessed.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub volumes: Vec<Volume>,
    pub vocab: Vocab,
}

impl Corpus {
    /// Loads `manifest.jsonl` and `vocab.txt` from `dir`.
    pub fn load(dir: impl AsRef<Path>, preprocess: &Preprocess) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let records = read_manifest(root.join(MANIFEST_FILE))?;
        let vocab = Vocab::read(root.join(VOCAB_FILE))?;
        let mut volumes = Vec::with_capacity(records.len());
        for r in &records {
            let p = Path::new(&r.volume_path);
            let p = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
            volumes.push(preprocess.apply(read_volume(&p)?)?);
        }
        Ok(Corpus {
            root,
            records,
            volumes,
            vocab,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sorted union of label keys across the corpus.
    pub fn attributes(&self) -> Vec<String> {
        let mut keys: Vec<String> = self
            .records
            .iter()
            .flat_map(|r| r.labels.keys().cloned())
            .collect();
        keys.sort();
        keys.dedup();
        keys
    }
}
