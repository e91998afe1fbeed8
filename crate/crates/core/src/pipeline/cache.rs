use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{read_jsonl, write_jsonl};

/// Directory of `<stage>-<hash>.jsonl` files, one record per question.
#[derive(Debug, Clone)]
pub struct StageCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Entry<T> {
    question_key: String,
    value: T,
}

impl StageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(StageCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, stage: &str, hash: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{hash}.jsonl"))
    }

    /// Stored records, or an empty map when nothing was cached yet.
    pub fn load<T: DeserializeOwned>(&self, stage: &str, hash: &str) -> Result<HashMap<String, T>> {
        let path = self.path(stage, hash);
        if !path.exists() {
            return Ok(HashMap::new());
        }
        Ok(read_jsonl::<Entry<T>>(path)?
            .into_iter()
            .map(|e| (e.question_key, e.value))
            .collect())
    }

    /// Replaces the stage file. Records are written sorted by key.
    pub fn store<T: Serialize + Clone>(&self, stage: &str, hash: &str, records: &HashMap<String, T>) -> Result<()> {
        let sorted: BTreeMap<&String, &T> = records.iter().collect();
        let entries: Vec<Entry<T>> = sorted
            .into_iter()
            .map(|(k, v)| Entry {
                question_key: k.clone(),
                value: v.clone(),
            })
            .collect();
        write_jsonl(self.path(stage, hash), &entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = StageCache::new(dir.path().join("c")).unwrap();
        let empty: HashMap<String, f64> = cache.load("retrieve", "abc").unwrap();
        assert!(empty.is_empty());
        let recs: HashMap<String, Vec<u64>> = [("q1".to_string(), vec![1, 2]), ("q0".to_string(), vec![3])].into();
        cache.store("retrieve", "abc", &recs).unwrap();
        assert_eq!(cache.load::<Vec<u64>>("retrieve", "abc").unwrap(), recs);
        let text = std::fs::read_to_string(cache.path("retrieve", "abc")).unwrap();
        assert!(text.find("q0").unwrap() < text.find("q1").unwrap());
        assert!(cache.load::<Vec<u64>>("retrieve", "other").unwrap().is_empty());
    }
}
