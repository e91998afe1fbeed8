//! Passages, QA examples, dataset filters and the pruner's golden dataset.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{Annotator, Tokenizer};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, stable_hash};

pub type PassageId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: PassageId,
    pub title: String,
    pub context: String,
}

impl Passage {
    pub fn new(id: PassageId, title: impl Into<String>, context: impl Into<String>) -> Self {
        Passage {
            id,
            title: title.into(),
            context: context.into(),
        }
    }
}

/// Immutable passage collection with O(1) lookup by id.
#[derive(Debug, Clone, Default)]
pub struct PassageStore {
    passages: Vec<Passage>,
    by_id: HashMap<PassageId, usize>,
}

impl PassageStore {
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (idx, p) in passages.iter().enumerate() {
            if p.title.trim().is_empty() || p.context.trim().is_empty() {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("passage {} has an empty title or context", p.id),
                });
            }
            if by_id.insert(p.id, idx).is_some() {
                return Err(Error::DuplicateId(p.id));
            }
        }
        Ok(PassageStore { passages, by_id })
    }

    /// Loads a JSON-lines file of `{id, title, context}` records.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_passages(read_jsonl(path)?)
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: PassageId) -> Option<&Passage> {
        self.by_id.get(&id).map(|&i| &self.passages[i])
    }

    pub fn require(&self, id: PassageId) -> Result<&Passage> {
        self.get(id).ok_or(Error::UnknownId(id))
    }

    pub fn contains(&self, id: PassageId) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = PassageId> + '_ {
        self.passages.iter().map(|p| p.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub golden_passage_id: Option<PassageId>,
}

impl QaExample {
    pub fn new(question: &str, answers: &[&str], golden: Option<PassageId>) -> Self {
        QaExample {
            question: question.to_string(),
            answers: answers.iter().map(|a| a.to_string()).collect(),
            golden_passage_id: golden,
        }
    }

    /// Key used by every per-question file format.
    pub fn key(&self) -> &str {
        &self.question
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.answers.is_empty() {
            return Err("example has no answers".into());
        }
        if self.answers.iter().any(|a| a.trim().is_empty()) {
            return Err("example has an empty answer".into());
        }
        Ok(())
    }
}

/// Loads `{question, answers, golden_passage_id}` records and checks golden ids
/// against `store` when one is given.
pub fn load_examples(path: impl AsRef<Path>, store: Option<&PassageStore>) -> Result<Vec<QaExample>> {
    let examples: Vec<QaExample> = read_jsonl(path)?;
    for (idx, ex) in examples.iter().enumerate() {
        ex.validate().map_err(|message| Error::Parse {
            line: idx + 1,
            message,
        })?;
        if let (Some(store), Some(g)) = (store, ex.golden_passage_id) {
            store.require(g)?;
        }
    }
    Ok(examples)
}

/// Keeps examples with a golden passage or an exact answer match somewhere in
/// their retrieved list.
pub fn filter_for_reranker<T: Tokenizer>(
    examples: &[QaExample],
    retrieved: &[Vec<PassageId>],
    store: &PassageStore,
    annotator: &Annotator<T>,
) -> Result<Vec<QaExample>> {
    if examples.len() != retrieved.len() {
        return Err(Error::invalid(format!(
            "{} examples but {} retrieved lists",
            examples.len(),
            retrieved.len()
        )));
    }
    let mut kept = Vec::new();
    for (ex, ids) in examples.iter().zip(retrieved) {
        let mut keep = ex.golden_passage_id.is_some();
        for &id in ids {
            let p = store.require(id)?;
            if !keep && annotator.contains_any(&p.context, &ex.answers) {
                keep = true;
            }
        }
        if keep {
            kept.push(ex.clone());
        }
    }
    Ok(kept)
}

/// Keeps examples with an exact answer match in the golden passage or in the
/// top-1 retrieved passage.
pub fn filter_for_reader<T: Tokenizer>(
    examples: &[QaExample],
    top1: &[PassageId],
    store: &PassageStore,
    annotator: &Annotator<T>,
) -> Result<Vec<QaExample>> {
    if examples.len() != top1.len() {
        return Err(Error::invalid(format!(
            "{} examples but {} top-1 ids",
            examples.len(),
            top1.len()
        )));
    }
    let mut kept = Vec::new();
    for (ex, &first) in examples.iter().zip(top1) {
        let first = store.require(first)?;
        let in_golden = match ex.golden_passage_id {
            Some(g) => annotator.contains_any(&store.require(g)?.context, &ex.answers),
            None => false,
        };
        if in_golden || annotator.contains_any(&first.context, &ex.answers) {
            kept.push(ex.clone());
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenEntry {
    pub passage_id: PassageId,
    pub label: Label,
}

/// Labelled passages for training or evaluating the relevance pruner.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenDataset {
    pub entries: Vec<GoldenEntry>,
}

impl GoldenDataset {
    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.label == Label::Positive).count()
    }

    pub fn negatives(&self) -> usize {
        self.entries.len() - self.positives()
    }
}

fn golden_ids(examples: &[QaExample]) -> HashSet<PassageId> {
    examples.iter().filter_map(|e| e.golden_passage_id).collect()
}

fn non_golden_pool(examples: &[QaExample], store: &PassageStore) -> (HashSet<PassageId>, Vec<PassageId>) {
    let golden = golden_ids(examples);
    let pool = store.ids().filter(|id| !golden.contains(id)).collect();
    (golden, pool)
}

fn push_with_negatives(
    entries: &mut Vec<GoldenEntry>,
    positive: PassageId,
    pool: &[PassageId],
    neg_per_pos: usize,
    rng: &mut ChaCha8Rng,
) {
    entries.push(GoldenEntry {
        passage_id: positive,
        label: Label::Positive,
    });
    for i in sample(rng, pool.len(), neg_per_pos).into_iter() {
        entries.push(GoldenEntry {
            passage_id: pool[i],
            label: Label::Negative,
        });
    }
}

/// Training split: one positive per golden-annotated example plus
/// `neg_per_pos` negatives drawn uniformly, without replacement inside one
/// example, from passages that are nobody's golden passage.
pub fn build_pruner_dataset(
    examples: &[QaExample],
    store: &PassageStore,
    neg_per_pos: usize,
    seed: u64,
) -> Result<GoldenDataset> {
    if neg_per_pos == 0 {
        return Err(Error::invalid("neg_per_pos must be at least 1"));
    }
    let (_, pool) = non_golden_pool(examples, store);
    if pool.len() < neg_per_pos {
        return Err(Error::Capacity(format!(
            "{} non-golden passages, {neg_per_pos} negatives needed per positive",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for ex in examples {
        if let Some(g) = ex.golden_passage_id {
            store.require(g)?;
            push_with_negatives(&mut entries, g, &pool, neg_per_pos, &mut rng);
        }
    }
    Ok(GoldenDataset { entries })
}

/// Balanced dev/test splits from golden-annotated development examples.
/// Examples go to dev or test 1:2 by a stable hash of the question, and each
/// positive gets exactly one negative.
pub fn build_pruner_eval_splits(
    examples: &[QaExample],
    store: &PassageStore,
    seed: u64,
) -> Result<(GoldenDataset, GoldenDataset)> {
    let (_, pool) = non_golden_pool(examples, store);
    if pool.is_empty() {
        return Err(Error::Capacity("no non-golden passages to sample negatives from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dev, mut test) = (Vec::new(), Vec::new());
    for ex in examples {
        if let Some(g) = ex.golden_passage_id {
            store.require(g)?;
            let target = if stable_hash(ex.key()) % 3 == 0 {
                &mut dev
            } else {
                &mut test
            };
            push_with_negatives(target, g, &pool, 1, &mut rng);
        }
    }
    Ok((GoldenDataset { entries: dev }, GoldenDataset { entries: test }))
}

/// Golden passage ids of a dataset, deduplicated and sorted.
pub fn golden_set(examples: &[QaExample]) -> BTreeSet<PassageId> {
    examples.iter().filter_map(|e| e.golden_passage_id).collect()
}
