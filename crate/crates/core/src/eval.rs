//! Exact match, Accuracy@K, ablation tables and the index-size sweep.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::{Annotator, Tokenizer};
use crate::corpus::{PassageId, PassageStore, QaExample};
use crate::error::{Error, Result};
use crate::pipeline::FusionMode;
use crate::pruner::{PrunedSet, RelevanceScores};

/// Reported numbers from full-scale runs. They are kept for reference
/// only; nothing at desk scale is expected to reach them.
pub mod reference {
    /// Test EM of the full system on the 21M-passage index (NQ-Open, TriviaQA-Open).
    pub const FULL_SYSTEM_EM: (f64, f64) = (55.0, 69.9);
    /// EM lost by pruning the index to 1.7M passages, per ablation row.
    pub const PRUNING_DELTA_RANGE: (f64, f64) = (-3.0, -1.5);
    /// Pruner accuracy on NQ-Golden and TQ-Golden test data.
    pub const PRUNER_ACCURACY: (f64, f64) = (90.63, 86.94);
    /// Dev accuracy of the membership probe on retrieval embeddings.
    pub const PROBE_ACCURACY: f64 = 84.1;
    /// EM gap between the full index and the golden passages alone.
    pub const GOLDEN_ONLY_GAP: (f64, f64) = (21.27, 21.01);
    /// NQ-Open test EM per ablation row (pruned 1.7M, full 21M), in
    /// [`super::ablation_rows`] order.
    pub const NQ_ABLATION: [(f64, f64); 10] = [
        (48.64, 50.78),
        (48.39, 49.92),
        (50.00, 51.88),
        (51.94, 54.13),
        (51.88, 54.07),
        (48.92, 50.72),
        (48.31, 50.69),
        (50.33, 52.44),
        (52.38, 54.90),
        (52.58, 54.99),
    ];
}

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match<S: AsRef<str>>(prediction: &str, golds: &[S]) -> bool {
    let p = normalize_answer(prediction);
    golds.iter().any(|g| normalize_answer(g.as_ref()) == p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub per_example: Vec<bool>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_indicators(metric: impl Into<String>, per_example: Vec<bool>, config_hash: impl Into<String>) -> Self {
        let hits = per_example.iter().filter(|b| **b).count();
        let value = if per_example.is_empty() {
            0.0
        } else {
            hits as f64 / per_example.len() as f64
        };
        EvalReport {
            metric: metric.into(),
            value,
            per_example,
            config_hash: config_hash.into(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn em_score<S: AsRef<str>>(predictions: &[S], examples: &[QaExample]) -> Result<f64> {
    Ok(em_report(predictions, examples, "")?.value)
}

pub fn em_report<S: AsRef<str>>(predictions: &[S], examples: &[QaExample], config_hash: &str) -> Result<EvalReport> {
    if predictions.len() != examples.len() {
        return Err(Error::DimensionMismatch {
            expected: examples.len(),
            got: predictions.len(),
        });
    }
    let bits = predictions
        .iter()
        .zip(examples)
        .map(|(p, ex)| exact_match(p.as_ref(), &ex.answers))
        .collect();
    Ok(EvalReport::from_indicators("em", bits, config_hash))
}

/// Fraction of examples whose top-`k` passages contain an answer as an exact
/// token subsequence.
pub fn accuracy_at_k<T: Tokenizer>(
    retrieved: &[Vec<PassageId>],
    examples: &[QaExample],
    store: &PassageStore,
    k: usize,
    annotator: &Annotator<T>,
) -> Result<EvalReport> {
    if retrieved.len() != examples.len() {
        return Err(Error::DimensionMismatch {
            expected: examples.len(),
            got: retrieved.len(),
        });
    }
    let mut bits = Vec::with_capacity(examples.len());
    for (ids, ex) in retrieved.iter().zip(examples) {
        if ids.len() < k {
            return Err(Error::invalid(format!(
                "question {:?} has {} retrieved passages, fewer than K={k}",
                ex.question,
                ids.len()
            )));
        }
        let mut hit = false;
        for id in &ids[..k] {
            if annotator.contains_any(&store.require(*id)?.context, &ex.answers) {
                hit = true;
                break;
            }
        }
        bits.push(hit);
    }
    Ok(EvalReport::from_indicators(format!("acc@{k}"), bits, ""))
}

/// The ten reader/fusion rows of the ablation table: reranker off then on,
/// each with ext, gen, naive, aggr, aggr+bd.
pub fn ablation_rows() -> Vec<(bool, FusionMode)> {
    [false, true]
        .into_iter()
        .flat_map(|rr| FusionMode::ALL.into_iter().map(move |m| (rr, m)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexSide {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub reranker: bool,
    pub mode: FusionMode,
    pub left: Option<f64>,
    pub right: Option<f64>,
}

impl AblationRow {
    pub fn delta(&self) -> Option<f64> {
        Some(self.left? - self.right?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub left_label: String,
    pub right_label: String,
    pub rows: Vec<AblationRow>,
}

/// Fills every cell of the ablation grid. A cell whose run fails is left
/// empty instead of aborting the table.
pub fn ablation_run<F>(left_label: &str, right_label: &str, mut em: F) -> AblationTable
where
    F: FnMut(bool, FusionMode, IndexSide) -> Result<f64>,
{
    let rows = ablation_rows()
        .into_iter()
        .map(|(reranker, mode)| AblationRow {
            reranker,
            mode,
            left: em(reranker, mode, IndexSide::Left).ok(),
            right: em(reranker, mode, IndexSide::Right).ok(),
        })
        .collect();
    AblationTable {
        left_label: left_label.to_string(),
        right_label: right_label.to_string(),
        rows,
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        writeln!(
            f,
            "{:<9} {:<8} {:<8} {:>9} {:>9} {:>7}",
            "rerank", "readers", "fusion", self.left_label, self.right_label, "delta"
        )?;
        for r in &self.rows {
            let (readers, fusion) = r.mode.table_labels();
            writeln!(
                f,
                "{:<9} {:<8} {:<8} {:>9} {:>9} {:>7}",
                if r.reranker { "yes" } else { "-" },
                readers,
                fusion,
                cell(r.left),
                cell(r.right),
                cell(r.delta()),
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: usize,
    pub em: f64,
}

/// The index for one sweep size: all golden passages plus the best-scored
/// other passages up to `size`.
pub fn sweep_index(scores: &RelevanceScores, golden: &BTreeSet<PassageId>, size: usize) -> Result<PrunedSet> {
    if size < golden.len() {
        return Err(Error::invalid(format!(
            "index size {size} is smaller than the {} golden passages",
            golden.len()
        )));
    }
    let mut ids = golden.clone();
    let mut tau = 0.0;
    for (id, p) in scores.ranked() {
        if ids.len() == size {
            tau = p;
            break;
        }
        ids.insert(id);
    }
    if ids.len() < size {
        return Err(Error::invalid(format!("index size {size} exceeds the {} available passages", ids.len())));
    }
    Ok(PrunedSet { ids, tau })
}

pub fn index_size_sweep<F>(
    sizes: &[usize],
    scores: &RelevanceScores,
    golden: &BTreeSet<PassageId>,
    mut run: F,
) -> Result<Vec<SweepPoint>>
where
    F: FnMut(&PrunedSet) -> Result<f64>,
{
    if sizes.is_empty() {
        return Err(Error::Empty("no sweep sizes".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sweep sizes must be strictly ascending"));
    }
    sizes
        .iter()
        .map(|&size| {
            let set = sweep_index(scores, golden, size)?;
            Ok(SweepPoint { size, em: run(&set)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("The Answer!"), "answer");
        assert_eq!(normalize_answer("plzeň"), "plzeň");
        assert_eq!(normalize_answer("a  b"), "b");
        assert!(exact_match("the Beatles", &["Beatles"]));
        assert!(!exact_match("Rolling Stones", &["Beatles"]));
        assert!(!exact_match("x", &[] as &[&str]));
    }

    #[test]
    fn em_scores() {
        let ex: Vec<QaExample> = ["a1", "a2", "a3", "a4"].iter().map(|a| QaExample::new("q", &[a], None)).collect();
        assert_eq!(em_score(&["a1", "a2", "a3", "a4"], &ex).unwrap(), 1.0);
        assert_eq!(em_score(&["a1", "x", "a3", "y"], &ex).unwrap(), 0.5);
        assert!(em_score(&["a1"], &ex).is_err());
    }

    #[test]
    fn accuracy_counts_and_rejects_short_lists() {
        let store = PassageStore::from_passages(vec![
            crate::corpus::Passage::new(1, "t", "nothing here"),
            crate::corpus::Passage::new(2, "t", "the capital is Paris"),
        ])
        .unwrap();
        let ex = vec![QaExample::new("capital?", &["Paris"], None)];
        let ann = Annotator::default();
        let r = vec![vec![1, 2]];
        assert_eq!(accuracy_at_k(&r, &ex, &store, 0, &ann).unwrap().value, 0.0);
        assert_eq!(accuracy_at_k(&r, &ex, &store, 1, &ann).unwrap().value, 0.0);
        assert_eq!(accuracy_at_k(&r, &ex, &store, 2, &ann).unwrap().value, 1.0);
        assert!(accuracy_at_k(&r, &ex, &store, 3, &ann).is_err());
    }

    #[test]
    fn identical_sides_give_zero_delta() {
        let t = ablation_run("1.7M", "21M", |rr, m, _| Ok(if rr { 0.5 } else { 0.25 } + m as u8 as f64 / 100.0));
        assert_eq!(t.rows.len(), 10);
        assert!(t.rows.iter().all(|r| r.delta() == Some(0.0)));
        let text = t.to_string();
        assert_eq!(text.lines().count(), 11);
    }

    #[test]
    fn failing_cell_is_absent() {
        let t = ablation_run("l", "r", |_, m, side| {
            if m == FusionMode::Generative && side == IndexSide::Right {
                Err(Error::MissingScore("gen".into()))
            } else {
                Ok(1.0)
            }
        });
        assert_eq!(t.rows.iter().filter(|r| r.right.is_none()).count(), 2);
        assert!(t.to_string().contains("n/a"));
    }

    #[test]
    fn sweep_sets() {
        let scores = RelevanceScores::new((0..10).map(|i| (i, 0.05 + i as f64 / 20.0)).collect::<BTreeMap<_, _>>()).unwrap();
        let golden = BTreeSet::from([0, 1]);
        let s = sweep_index(&scores, &golden, 4).unwrap();
        assert_eq!(s.ids, BTreeSet::from([0, 1, 9, 8]));
        assert_eq!(sweep_index(&scores, &golden, 10).unwrap().ids.len(), 10);
        assert!(sweep_index(&scores, &golden, 1).is_err());
        assert!(sweep_index(&scores, &golden, 11).is_err());
        let pts = index_size_sweep(&[2, 5, 10], &scores, &golden, |s| Ok(s.len() as f64 / 10.0)).unwrap();
        assert_eq!(pts.iter().map(|p| p.em).collect::<Vec<_>>(), vec![0.2, 0.5, 1.0]);
        assert!(index_size_sweep(&[5, 2], &scores, &golden, |_| Ok(0.0)).is_err());
    }
}
