//! Provider backed by score files exported from real models.
//!
//! Directory layout:
//! - `queries.jsonl`: `{"question_key", "embedding": [f32]}`
//! - `rerank.jsonl`: `{"question_key", "scores": {"<pid>": f64}}`
//! - `heads.json`: reader heads
//! - `encoder/<hash of question_key>/<pid>.enc`: `R2D2ENC1` files
//! - `generative.jsonl`: `{"question_key", "answer", "logp", "span_logprobs": {text: f64}}`

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, PassageId, QaExample};
use crate::error::{Error, Result};
use crate::io::{fingerprint, read_jsonl, stable_hash};
use crate::reader::{EncoderOutput, ReaderHeads};
use crate::reranker::{load_rerank_scores, CandidateList, RerankScores};

use super::{GeneratedAnswer, ScoreProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub question_key: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeRecord {
    pub question_key: String,
    pub answer: String,
    pub logp: f64,
    #[serde(default)]
    pub span_logprobs: HashMap<String, f64>,
}

/// Where the encoder output of `(question_key, passage)` lives under `dir`.
pub fn encoder_path(dir: &Path, question_key: &str, passage: PassageId) -> PathBuf {
    dir.join("encoder")
        .join(format!("{:016x}", stable_hash(question_key)))
        .join(format!("{passage}.enc"))
}

pub struct FileProvider {
    dir: PathBuf,
    queries: HashMap<String, Vec<f32>>,
    rerank: HashMap<String, RerankScores>,
    generative: HashMap<String, GenerativeRecord>,
    heads: Option<ReaderHeads>,
}

fn optional<T>(path: &Path, load: impl FnOnce(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        load(path).map(Some)
    } else {
        Ok(None)
    }
}

impl FileProvider {
    /// Loads whichever files exist. A missing file only fails the stage
    /// that needs it.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(Error::invalid(format!("{} is not a directory", dir.display())));
        }
        let queries = optional(&dir.join("queries.jsonl"), |p| read_jsonl::<QueryRecord>(p))?
            .unwrap_or_default()
            .into_iter()
            .map(|r| (r.question_key, r.embedding))
            .collect();
        let rerank = optional(&dir.join("rerank.jsonl"), |p| load_rerank_scores(p))?.unwrap_or_default();
        let generative = optional(&dir.join("generative.jsonl"), |p| read_jsonl::<GenerativeRecord>(p))?
            .unwrap_or_default()
            .into_iter()
            .map(|r| (r.question_key.clone(), r))
            .collect();
        let heads = optional(&dir.join("heads.json"), |p| ReaderHeads::load(p))?;
        Ok(FileProvider {
            dir,
            queries,
            rerank,
            generative,
            heads,
        })
    }

    fn generative_record(&self, q: &QaExample) -> Result<&GenerativeRecord> {
        self.generative
            .get(q.key())
            .ok_or_else(|| Error::MissingScore(format!("generative record for {:?}", q.key())))
    }
}

impl ScoreProvider for FileProvider {
    fn query_embedding(&self, q: &QaExample) -> Result<Vec<f32>> {
        self.queries
            .get(q.key())
            .cloned()
            .ok_or_else(|| Error::MissingScore(format!("query embedding for {:?}", q.key())))
    }

    fn rerank_scores(&self, q: &QaExample, candidates: &CandidateList) -> Result<RerankScores> {
        let all = self
            .rerank
            .get(q.key())
            .ok_or_else(|| Error::MissingScore(format!("rerank scores for {:?}", q.key())))?;
        candidates
            .ids()
            .into_iter()
            .map(|id| {
                all.get(&id)
                    .map(|s| (id, *s))
                    .ok_or_else(|| Error::MissingScore(format!("rerank score for passage {id} of {:?}", q.key())))
            })
            .collect()
    }

    fn encode(&self, q: &QaExample, passage: &Passage) -> Result<EncoderOutput> {
        let path = encoder_path(&self.dir, q.key(), passage.id);
        if !path.exists() {
            return Err(Error::MissingScore(format!("encoder output {}", path.display())));
        }
        EncoderOutput::read(path, passage.id)
    }

    fn reader_heads(&self) -> Result<ReaderHeads> {
        self.heads
            .clone()
            .ok_or_else(|| Error::MissingScore(format!("{}/heads.json", self.dir.display())))
    }

    fn generate(&self, q: &QaExample, _passages: &[PassageId]) -> Result<GeneratedAnswer> {
        let r = self.generative_record(q)?;
        Ok(GeneratedAnswer {
            text: r.answer.clone(),
            logp: r.logp,
        })
    }

    fn span_logprobs(&self, q: &QaExample, _passages: &[PassageId], spans: &[String]) -> Result<HashMap<String, f64>> {
        let r = self.generative_record(q)?;
        spans
            .iter()
            .map(|s| {
                r.span_logprobs
                    .get(s)
                    .map(|lp| (s.clone(), *lp))
                    .ok_or_else(|| Error::MissingScore(format!("generative score for span {s:?}")))
            })
            .collect()
    }

    fn fingerprint(&self) -> String {
        fingerprint(&("files", self.dir.display().to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_jsonl;

    #[test]
    fn missing_files_fail_only_their_stage() {
        let dir = tempfile::tempdir().unwrap();
        write_jsonl(
            dir.path().join("queries.jsonl"),
            &[QueryRecord {
                question_key: "q".into(),
                embedding: vec![1.0, 2.0],
            }],
        )
        .unwrap();
        let p = FileProvider::open(dir.path()).unwrap();
        let q = QaExample::new("q", &["a"], None);
        assert_eq!(p.query_embedding(&q).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(p.reader_heads(), Err(Error::MissingScore(_))));
        assert!(matches!(p.generate(&q, &[]), Err(Error::MissingScore(_))));
        let other = QaExample::new("other", &["a"], None);
        assert!(p.query_embedding(&other).is_err());
    }

    #[test]
    fn encoder_paths_are_per_question() {
        let d = Path::new("/x");
        assert_ne!(encoder_path(d, "a", 1), encoder_path(d, "b", 1));
        assert!(encoder_path(d, "a", 1).ends_with("1.enc"));
    }
}
