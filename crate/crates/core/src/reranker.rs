//! Passage reranking on top of externally computed cross-encoder scores.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{Annotator, Tokenizer};
use crate::corpus::{PassageId, PassageStore, QaExample};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::math::softmax;

/// Most candidates a list may carry (top-400 retrieval during training).
pub const MAX_CANDIDATES: usize = 400;

/// Softmax whose normalization runs over the keys of `scores`. Keys are
/// visited in sorted order so the result does not depend on insertion order.
pub fn softmax_over_set<K: Ord + Clone>(scores: &BTreeMap<K, f64>) -> Result<BTreeMap<K, f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax over an empty set".into()));
    }
    if scores.values().any(|s| !s.is_finite()) {
        return Err(Error::invalid("softmax over non-finite scores"));
    }
    let values: Vec<f64> = scores.values().copied().collect();
    Ok(scores.keys().cloned().zip(softmax(&values)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub passage_id: PassageId,
    pub retriever_score: f64,
}

/// Ordered candidate passages for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub question_key: String,
    pub entries: Vec<Candidate>,
}

impl CandidateList {
    pub fn new(question_key: impl Into<String>, entries: Vec<Candidate>) -> Result<Self> {
        if entries.len() > MAX_CANDIDATES {
            return Err(Error::invalid(format!(
                "{} candidates exceed the limit of {MAX_CANDIDATES}",
                entries.len()
            )));
        }
        let mut seen = HashSet::new();
        for c in &entries {
            if !seen.insert(c.passage_id) {
                return Err(Error::DuplicateId(c.passage_id));
            }
        }
        Ok(CandidateList {
            question_key: question_key.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<PassageId> {
        self.entries.iter().map(|c| c.passage_id).collect()
    }

    /// Retriever-score distribution over the list (`P_r`).
    pub fn retriever_distribution(&self) -> Result<BTreeMap<PassageId, f64>> {
        softmax_over_set(&self.entries.iter().map(|c| (c.passage_id, c.retriever_score)).collect())
    }
}

/// Unnormalized cross-encoder scores keyed by passage id.
pub type RerankScores = HashMap<PassageId, f64>;

fn score_of(scores: &RerankScores, id: PassageId) -> Result<f64> {
    let s = *scores
        .get(&id)
        .ok_or_else(|| Error::MissingScore(format!("rerank score for passage {id}")))?;
    if !s.is_finite() {
        return Err(Error::invalid(format!("rerank score for passage {id} is not finite")));
    }
    Ok(s)
}

/// `P_rr(p | q, C_r)`: softmax of rerank scores over the candidate set.
pub fn rerank_distribution(candidates: &CandidateList, scores: &RerankScores) -> Result<BTreeMap<PassageId, f64>> {
    let restricted = candidates
        .entries
        .iter()
        .map(|c| Ok((c.passage_id, score_of(scores, c.passage_id)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    softmax_over_set(&restricted)
}

/// Sorts by rerank score (ties: retriever score, then id) and keeps `keep`.
pub fn apply_rerank(candidates: &CandidateList, scores: &RerankScores, keep: usize) -> Result<CandidateList> {
    if keep > candidates.len() {
        return Err(Error::invalid(format!("keep={keep} exceeds {} candidates", candidates.len())));
    }
    let mut scored = candidates
        .entries
        .iter()
        .map(|c| Ok((score_of(scores, c.passage_id)?, *c)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|(sa, a), (sb, b)| {
        sb.total_cmp(sa)
            .then(b.retriever_score.total_cmp(&a.retriever_score))
            .then(a.passage_id.cmp(&b.passage_id))
    });
    Ok(CandidateList {
        question_key: candidates.question_key.clone(),
        entries: scored.into_iter().take(keep).map(|(_, c)| c).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankBatch {
    pub positive_id: PassageId,
    pub negative_ids: Vec<PassageId>,
}

/// One positive plus up to `n_negatives` hard negatives.
///
/// The positive is the golden passage when known, otherwise the best-ranked
/// retrieved passage containing an answer. Negatives are drawn uniformly
/// without replacement from retrieved passages with no answer match; fewer
/// are returned when the pool is smaller than `n_negatives`.
pub fn build_training_batch<T: Tokenizer>(
    example: &QaExample,
    retrieved: &[PassageId],
    store: &PassageStore,
    annotator: &Annotator<T>,
    n_negatives: usize,
    seed: u64,
) -> Result<RerankBatch> {
    let mut with_answer = Vec::new();
    let mut without = Vec::new();
    for &id in retrieved {
        if annotator.contains_any(&store.require(id)?.context, &example.answers) {
            with_answer.push(id);
        } else {
            without.push(id);
        }
    }
    let positive_id = match example.golden_passage_id {
        Some(g) => g,
        None => *with_answer.first().ok_or_else(|| {
            Error::ShouldHaveBeenFiltered(format!("no positive passage for {:?}", example.question))
        })?,
    };
    without.retain(|&id| id != positive_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = n_negatives.min(without.len());
    let negative_ids = sample(&mut rng, without.len(), amount)
        .into_iter()
        .map(|i| without[i])
        .collect();
    Ok(RerankBatch {
        positive_id,
        negative_ids,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Cross-entropy of the positive under a softmax over the batch scores.
pub fn reranker_loss(scores: &[f64], positive: usize) -> Result<LossGrad> {
    if positive >= scores.len() {
        return Err(Error::invalid(format!("positive index {positive} outside batch of {}", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite rerank score"));
    }
    let logp = crate::math::log_softmax(scores);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[positive] -= 1.0;
    Ok(LossGrad {
        loss: -logp[positive],
        grad,
    })
}

/// Line of a rerank score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRecord {
    pub question_key: String,
    pub scores: BTreeMap<String, f64>,
}

impl RerankRecord {
    pub fn new(question_key: impl Into<String>, scores: &RerankScores) -> Self {
        RerankRecord {
            question_key: question_key.into(),
            scores: scores.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn to_scores(&self) -> Result<RerankScores> {
        self.scores
            .iter()
            .map(|(k, v)| {
                let id = k
                    .parse::<PassageId>()
                    .map_err(|_| Error::Format(format!("rerank score key {k:?} is not a passage id")))?;
                Ok((id, *v))
            })
            .collect()
    }
}

pub fn load_rerank_scores(path: impl AsRef<Path>) -> Result<HashMap<String, RerankScores>> {
    read_jsonl::<RerankRecord>(path)?
        .into_iter()
        .map(|r| Ok((r.question_key.clone(), r.to_scores()?)))
        .collect()
}

pub fn save_rerank_scores(path: impl AsRef<Path>, records: &[RerankRecord]) -> Result<()> {
    write_jsonl(path, records)
}
