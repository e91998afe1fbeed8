//! Question-independent index pruning from apriori relevance probabilities,
//! plus the probe asking whether embeddings already encode that relevance.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{GoldenDataset, Label, PassageId};
use crate::error::{Error, Result};
use crate::fusion::{bce, gradient_descent, TrainConfig};
use crate::index::EmbeddingMatrix;
use crate::io::{read_jsonl, write_jsonl};
use crate::math::{dot, sigmoid};

/// `P(r | p)` per passage, each strictly inside (0, 1).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelevanceScores(BTreeMap<PassageId, f64>);

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ScoreLine {
    id: PassageId,
    p: f64,
}

impl RelevanceScores {
    pub fn new(scores: BTreeMap<PassageId, f64>) -> Result<Self> {
        if let Some((id, p)) = scores.iter().find(|(_, p)| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::invalid(format!("relevance of passage {id} is {p}, outside (0,1)")));
        }
        Ok(RelevanceScores(scores))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let lines: Vec<ScoreLine> = read_jsonl(path)?;
        let mut map = BTreeMap::new();
        for l in lines {
            if map.insert(l.id, l.p).is_some() {
                return Err(Error::DuplicateId(l.id));
            }
        }
        Self::new(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let lines: Vec<ScoreLine> = self.0.iter().map(|(&id, &p)| ScoreLine { id, p }).collect();
        write_jsonl(path, &lines)
    }

    pub fn get(&self, id: PassageId) -> Option<f64> {
        self.0.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PassageId, f64)> + '_ {
        self.0.iter().map(|(&k, &v)| (k, v))
    }

    /// Ids by descending score, ties by ascending id.
    pub fn ranked(&self) -> Vec<(PassageId, f64)> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

/// Passages kept in the index and the threshold that selected them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedSet {
    pub ids: BTreeSet<PassageId>,
    pub tau: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PrunedHeader {
    tau: f64,
    count: usize,
}

impl PrunedSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn as_hash_set(&self) -> HashSet<PassageId> {
        self.ids.iter().copied().collect()
    }

    /// One JSON header line (`tau`, `count`), then one id per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut w,
            &PrunedHeader {
                tau: self.tau,
                count: self.ids.len(),
            },
        )?;
        writeln!(w)?;
        for id in &self.ids {
            writeln!(w, "{id}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header: PrunedHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?).map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?,
            None => return Err(Error::Format("empty pruned-set file".into())),
        };
        let mut ids = BTreeSet::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let id = line.trim().parse().map_err(|_| Error::Parse {
                line: i + 2,
                message: format!("{line:?} is not a passage id"),
            })?;
            ids.insert(id);
        }
        if ids.len() != header.count {
            return Err(Error::Format(format!("header count {} but {} ids", header.count, ids.len())));
        }
        Ok(PrunedSet { ids, tau: header.tau })
    }
}

/// Passages with `P(r|p) > tau`.
pub fn select_by_threshold(scores: &RelevanceScores, tau: f64) -> Result<PrunedSet> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("threshold {tau} outside (0,1)")));
    }
    Ok(PrunedSet {
        ids: scores.iter().filter(|(_, p)| *p > tau).map(|(id, _)| id).collect(),
        tau,
    })
}

/// The `n` most relevant passages. The reported threshold is the `(n+1)`-th
/// largest score, or 0 when every passage is kept.
pub fn pool_top_n(scores: &RelevanceScores, n: usize) -> Result<PrunedSet> {
    if n == 0 || n > scores.len() {
        return Err(Error::invalid(format!("pool size {n} outside 1..={}", scores.len())));
    }
    let ranked = scores.ranked();
    let tau = ranked.get(n).map_or(0.0, |(_, p)| *p);
    Ok(PrunedSet {
        ids: ranked[..n].iter().map(|(id, _)| *id).collect(),
        tau,
    })
}

pub fn inject_golden(pruned: &PrunedSet, golden: &BTreeSet<PassageId>) -> PrunedSet {
    PrunedSet {
        ids: pruned.ids.union(golden).copied().collect(),
        tau: pruned.tau,
    }
}

/// Fraction of entries where `score > threshold` agrees with the label.
pub fn evaluate_pruner(scores: &RelevanceScores, dataset: &GoldenDataset, threshold: f64) -> Result<f64> {
    if dataset.entries.is_empty() {
        return Err(Error::Empty("pruner evaluation set".into()));
    }
    let mut correct = 0usize;
    for e in &dataset.entries {
        let p = scores
            .get(e.passage_id)
            .ok_or_else(|| Error::MissingScore(format!("relevance of passage {}", e.passage_id)))?;
        if (p > threshold) == (e.label == Label::Positive) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.entries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSetStats {
    /// L2 distance between the per-dimension mean vectors.
    pub mean_l2: f64,
    /// L2 distance between the per-dimension variance vectors.
    pub var_l2: f64,
    pub mean_norm_p: f64,
    pub mean_norm_n: f64,
}

fn moments(m: &EmbeddingMatrix) -> (Vec<f64>, Vec<f64>, f64) {
    let d = m.dim();
    let n = m.len() as f64;
    let mut mean = vec![0.0; d];
    let mut norm = 0.0;
    for i in 0..m.len() {
        let row = m.row_f32(i);
        norm += row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        for (acc, &x) in mean.iter_mut().zip(&row) {
            *acc += x as f64;
        }
    }
    mean.iter_mut().for_each(|x| *x /= n);
    let mut var = vec![0.0; d];
    for i in 0..m.len() {
        for ((acc, &x), mu) in var.iter_mut().zip(&m.row_f32(i)).zip(&mean) {
            *acc += (x as f64 - mu).powi(2);
        }
    }
    var.iter_mut().for_each(|x| *x /= n);
    (mean, var, norm / n)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn embedding_set_stats(kept: &EmbeddingMatrix, rest: &EmbeddingMatrix) -> Result<EmbeddingSetStats> {
    if kept.is_empty() || rest.is_empty() {
        return Err(Error::Empty("embedding set".into()));
    }
    if kept.dim() != rest.dim() {
        return Err(Error::DimensionMismatch {
            expected: kept.dim(),
            got: rest.dim(),
        });
    }
    let (mp, vp, np) = moments(kept);
    let (mn, vn, nn) = moments(rest);
    Ok(EmbeddingSetStats {
        mean_l2: l2(&mp, &mn),
        var_l2: l2(&vp, &vn),
        mean_norm_p: np,
        mean_norm_n: nn,
    })
}

/// Same statistics for a random split of `kept ∪ rest` with the original
/// sizes. The baseline the true split is compared against.
pub fn permuted_split_stats(kept: &EmbeddingMatrix, rest: &EmbeddingMatrix, seed: u64) -> Result<EmbeddingSetStats> {
    if kept.dim() != rest.dim() {
        return Err(Error::DimensionMismatch {
            expected: kept.dim(),
            got: rest.dim(),
        });
    }
    let mut rows: Vec<Vec<f32>> = (0..kept.len()).map(|i| kept.row_f32(i)).collect();
    rows.extend((0..rest.len()).map(|i| rest.row_f32(i)));
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tail = rows.split_off(kept.len());
    let a = EmbeddingMatrix::from_f32_rows(kept.dim(), (0..rows.len() as u64).collect(), &rows)?;
    let b = EmbeddingMatrix::from_f32_rows(kept.dim(), (0..tail.len() as u64).collect(), &tail)?;
    embedding_set_stats(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub dev_accuracy: f64,
    pub final_loss: f64,
}

/// Share of each class held out for the probe's dev accuracy.
pub const PROBE_DEV_FRACTION: f64 = 0.2;

/// Logistic-regression probe predicting membership in the kept set from the
/// embedding alone. Trains on a balanced set, reports held-out accuracy.
pub fn train_membership_classifier(
    kept: &EmbeddingMatrix,
    rest: &EmbeddingMatrix,
    cfg: &TrainConfig,
) -> Result<MembershipProbe> {
    if kept.len() != rest.len() {
        return Err(Error::invalid(format!(
            "probe needs a balanced set, got {} kept vs {} rest",
            kept.len(),
            rest.len()
        )));
    }
    if kept.dim() != rest.dim() {
        return Err(Error::DimensionMismatch {
            expected: kept.dim(),
            got: rest.dim(),
        });
    }
    let n = kept.len();
    let dev_n = ((n as f64) * PROBE_DEV_FRACTION).round() as usize;
    if n < 2 || dev_n == 0 || dev_n == n {
        return Err(Error::Capacity(format!("{n} rows per class is too few for a dev split")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut split = |m: &EmbeddingMatrix, label: bool| {
        let mut order: Vec<usize> = (0..m.len()).collect();
        order.shuffle(&mut rng);
        let rows: Vec<(Vec<f64>, bool)> = order
            .into_iter()
            .map(|i| (m.row_f32(i).into_iter().map(f64::from).collect(), label))
            .collect();
        let (dev, train) = rows.split_at(dev_n);
        (train.to_vec(), dev.to_vec())
    };
    let (mut train, mut dev) = split(kept, true);
    let (train_n, dev_neg) = split(rest, false);
    train.extend(train_n);
    dev.extend(dev_neg);

    let d = kept.dim();
    let objective = |p: &[f64]| {
        let (w, b) = (&p[..d], p[d]);
        let mut loss = 0.0;
        let mut grad = vec![0.0; d + 1];
        for (x, y) in &train {
            let (l, g) = bce(dot(w, x) + b, *y);
            loss += l;
            for (gi, xi) in grad[..d].iter_mut().zip(x) {
                *gi += g * xi;
            }
            grad[d] += g;
        }
        let m = train.len() as f64;
        grad.iter_mut().for_each(|g| *g /= m);
        (loss / m, grad)
    };
    let (params, report) = gradient_descent(vec![0.0; d + 1], cfg, objective)?;
    let (w, b) = (&params[..d], params[d]);
    let correct = dev
        .iter()
        .filter(|(x, y)| (sigmoid(dot(w, x) + b) >= 0.5) == *y)
        .count();
    Ok(MembershipProbe {
        weights: w.to_vec(),
        bias: b,
        dev_accuracy: correct as f64 / dev.len() as f64,
        final_loss: report.final_loss,
    })
}
