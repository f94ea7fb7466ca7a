//! Flat caption corpus: one JSON record per line.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ForgeError, Result};

/// One image with its designated caption and any alternates. Image features
/// are stored inline or referenced by a path (relative to the corpus file)
/// holding a JSON array of numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub leaf_id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alt_captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_feature_ref: Option<String>,
}

impl CorpusRecord {
    /// Designated caption first, then the alternates.
    pub fn all_captions(&self) -> Vec<String> {
        std::iter::once(self.caption.clone()).chain(self.alt_captions.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
}

impl Corpus {
    pub fn new(records: Vec<CorpusRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads JSONL, resolving `image_feature_ref` entries into inline features.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| ForgeError::io(path, e))?;
        let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| ForgeError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: CorpusRecord = serde_json::from_str(&line)
                .map_err(|e| ForgeError::Corpus(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            if rec.image_features.is_none() {
                if let Some(r) = &rec.image_feature_ref {
                    let p = base.join(r);
                    let text = std::fs::read_to_string(&p).map_err(|e| ForgeError::io(&p, e))?;
                    let feats: Vec<f64> = serde_json::from_str(&text)
                        .map_err(|e| ForgeError::Corpus(format!("{}: {e}", p.display())))?;
                    rec.image_features = Some(feats);
                }
            }
            records.push(rec);
        }
        let corpus = Self { records };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r).map_err(|e| ForgeError::Corpus(e.to_string()))?;
            buf.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| ForgeError::io(path, e))?;
        f.write_all(&buf).map_err(|e| ForgeError::io(path, e))
    }

    /// Unique leaf ids, nonblank captions, one feature dimension throughout.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        let mut dim = None;
        for r in &self.records {
            if !seen.insert(&r.leaf_id) {
                return Err(ForgeError::Corpus(format!("duplicate leaf_id {}", r.leaf_id)));
            }
            if r.caption.trim().is_empty() {
                return Err(ForgeError::Corpus(format!("leaf {} has an empty caption", r.leaf_id)));
            }
            if let Some(f) = &r.image_features {
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(ForgeError::Corpus(format!("leaf {} has non-finite features", r.leaf_id)));
                }
                match dim {
                    None => dim = Some(f.len()),
                    Some(d) if d != f.len() => {
                        return Err(ForgeError::Corpus(format!(
                            "leaf {} has {} features, expected {d}",
                            r.leaf_id,
                            f.len()
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}
