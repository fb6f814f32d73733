//! Content-addressed response cache: one JSON file per entry, written atomically.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use snowball_core::decoding::StepTrace;
use snowball_core::hashing::sha256_hex;

/// Everything that determines a response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub sample_id: String,
    pub setting: String,
    pub prompt_mode: String,
    /// Decoding mode, sampling configuration and token budget.
    pub decoding: String,
    pub backend: String,
    pub seed: u64,
    /// Hash of the transmitted conversation, so edited datasets miss.
    pub context: String,
}

impl CacheKey {
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("key serializes").as_bytes())
    }
}

pub fn context_hash(conv: &snowball_core::conversation::Conversation) -> String {
    sha256_hex(serde_json::to_string(conv).expect("conversation serializes").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub response: String,
    #[serde(default)]
    pub trace: Vec<StepTrace>,
}

pub struct Cache {
    dir: PathBuf,
}

impl Cache {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Cache { dir: dir.to_path_buf() })
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(&digest[..2]).join(format!("{digest}.json"))
    }

    /// The stored entry for `key`, if present and intact.
    pub fn get(&self, key: &CacheKey) -> Option<CacheEntry> {
        let text = std::fs::read_to_string(self.path(&key.digest())).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        (entry.key == *key).then_some(entry)
    }

    /// Writes through a temporary file and renames, so readers never see partial entries.
    pub fn put(&self, entry: &CacheEntry) -> std::io::Result<()> {
        let path = self.path(&entry.key.digest());
        let parent = path.parent().expect("entry has a parent");
        std::fs::create_dir_all(parent)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        tmp.write_all(serde_json::to_string(entry).expect("entry serializes").as_bytes())?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        walk_json(&self.dir)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn walk_json(dir: &Path) -> usize {
    let Ok(rd) = std::fs::read_dir(dir) else { return 0 };
    rd.flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                walk_json(&p)
            } else {
                (p.extension().and_then(|x| x.to_str()) == Some("json")) as usize
            }
        })
        .sum()
}
