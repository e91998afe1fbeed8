//! A neural-free provider built from token overlap, so the whole pipeline
//! can run on toy corpora.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::annotate::{contains_exact, tokenize_simple, TokenSeq};
use crate::corpus::{Passage, PassageId, PassageStore, QaExample};
use crate::error::{Error, Result};
use crate::index::EmbeddingMatrix;
use crate::io::{fingerprint, slice_chars};
use crate::reader::{EncoderOutput, ReaderHeads, TokenKind, MAX_SEQ_LEN};
use crate::reranker::{CandidateList, RerankScores};

use super::{GeneratedAnswer, ScoreProvider};

/// Hidden features: question overlap (CLS only), answer-start cue,
/// answer-end cue, context indicator.
pub const LEXICAL_HIDDEN_DIM: usize = 4;
const MAX_QUESTION_TOKENS: usize = 64;
const MAX_TITLE_TOKENS: usize = 32;
const MAX_GENERATED_LEN: usize = 10;
const SPAN_SMOOTHING: f64 = 1e-2;

pub struct LexicalProvider {
    store: std::sync::Arc<PassageStore>,
    vocab: BTreeMap<String, usize>,
    idf: Vec<f64>,
    passage_tokens: HashMap<PassageId, HashSet<String>>,
}

fn is_word(tok: &str) -> bool {
    tok.chars().all(char::is_alphanumeric)
}

impl LexicalProvider {
    pub fn new(store: std::sync::Arc<PassageStore>) -> Result<Self> {
        if store.is_empty() {
            return Err(Error::Empty("lexical provider needs passages".into()));
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut passage_tokens = HashMap::with_capacity(store.len());
        for p in store.iter() {
            let set: HashSet<String> = tokenize_simple(&p.context).tokens.into_iter().collect();
            for t in &set {
                *df.entry(t.clone()).or_default() += 1;
            }
            passage_tokens.insert(p.id, set);
        }
        let n = store.len() as f64;
        let idf = df.values().map(|d| (1.0 + n / *d as f64).ln()).collect();
        let vocab = df.into_keys().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(LexicalProvider {
            store,
            vocab,
            idf,
            passage_tokens,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn idf(&self, token: &str) -> f64 {
        self.vocab.get(token).map_or(0.0, |i| self.idf[*i])
    }

    fn question_set(&self, question: &str) -> HashSet<String> {
        tokenize_simple(question).tokens.into_iter().collect()
    }

    /// Sum of idf over distinct question tokens that occur in the passage.
    pub fn lexical_score(&self, question: &str, passage: PassageId) -> Result<f64> {
        let tokens = self.passage_tokens.get(&passage).ok_or(Error::UnknownId(passage))?;
        let mut q: Vec<String> = self.question_set(question).into_iter().collect();
        q.sort();
        Ok(q.iter().filter(|t| tokens.contains(*t)).map(|t| self.idf(t)).sum())
    }

    /// Passage rows carry each present token's idf, so a query with ones
    /// at the question's tokens scores `lexical_score` up to fp16 rounding.
    pub fn build_index(&self) -> Result<EmbeddingMatrix> {
        let ids: Vec<PassageId> = self.store.ids().collect();
        let rows: Vec<Vec<f32>> = ids
            .iter()
            .map(|id| {
                let mut row = vec![0f32; self.vocab.len()];
                for t in &self.passage_tokens[id] {
                    let i = self.vocab[t];
                    row[i] = self.idf[i] as f32;
                }
                row
            })
            .collect();
        EmbeddingMatrix::from_f32_rows(self.vocab.len(), ids, &rows)
    }

    fn cues(&self, context: &TokenSeq, question: &HashSet<String>) -> (Vec<bool>, Vec<bool>) {
        let toks = &context.tokens;
        let n = toks.len();
        let candidate = |i: usize| is_word(&toks[i]) && !question.contains(&toks[i]);
        let start = (0..n)
            .map(|i| candidate(i) && i > 0 && question.contains(&toks[i - 1]))
            .collect();
        let end = (0..n)
            .map(|i| candidate(i) && (i + 1 == n || !is_word(&toks[i + 1]) || question.contains(&toks[i + 1])))
            .collect();
        (start, end)
    }

    /// Cue-delimited spans of a passage, shortest end for each start.
    fn heuristic_spans(&self, q: &QaExample, passage: &Passage) -> Vec<String> {
        let qset = self.question_set(&q.question);
        let ctx = tokenize_simple(&passage.context);
        let (start, end) = self.cues(&ctx, &qset);
        let mut out = Vec::new();
        for s in (0..ctx.len()).filter(|&s| start[s]) {
            if let Some(e) = (s..ctx.len().min(s + MAX_GENERATED_LEN)).find(|&e| end[e]) {
                out.push(slice_chars(&passage.context, ctx.char_spans[s].0, ctx.char_spans[e].1).to_string());
            }
        }
        out
    }
}

impl ScoreProvider for LexicalProvider {
    fn query_embedding(&self, q: &QaExample) -> Result<Vec<f32>> {
        let mut v = vec![0f32; self.vocab.len()];
        for t in self.question_set(&q.question) {
            if let Some(i) = self.vocab.get(&t) {
                v[*i] = 1.0;
            }
        }
        Ok(v)
    }

    fn rerank_scores(&self, q: &QaExample, candidates: &CandidateList) -> Result<RerankScores> {
        candidates
            .ids()
            .into_iter()
            .map(|id| Ok((id, self.lexical_score(&q.question, id)?)))
            .collect()
    }

    fn encode(&self, q: &QaExample, passage: &Passage) -> Result<EncoderOutput> {
        let qset = self.question_set(&q.question);
        let q_len = tokenize_simple(&q.question).len().min(MAX_QUESTION_TOKENS);
        let t_len = tokenize_simple(&passage.title).len().min(MAX_TITLE_TOKENS);
        let ctx = tokenize_simple(&passage.context);
        let c_len = ctx.len().min(MAX_SEQ_LEN - q_len - t_len - 4);
        let (start, end) = self.cues(&ctx, &qset);

        let max_score: f64 = qset.iter().map(|t| self.idf(t)).sum();
        let overlap = if max_score > 0.0 {
            self.lexical_score(&q.question, passage.id)? / max_score
        } else {
            0.0
        };

        let mut kinds = vec![TokenKind::Cls];
        kinds.extend(std::iter::repeat(TokenKind::Question).take(q_len));
        kinds.push(TokenKind::Sep);
        kinds.extend(std::iter::repeat(TokenKind::Title).take(t_len));
        kinds.push(TokenKind::Sep);
        let ctx_from = kinds.len();
        kinds.extend(std::iter::repeat(TokenKind::Context).take(c_len));
        kinds.push(TokenKind::Sep);

        let mut offsets = vec![None; kinds.len()];
        let mut hidden = vec![0.0; kinds.len() * LEXICAL_HIDDEN_DIM];
        hidden[0] = overlap;
        for i in 0..c_len {
            let pos = ctx_from + i;
            let (a, b) = ctx.char_spans[i];
            offsets[pos] = Some((a as u32, b as u32));
            let row = &mut hidden[pos * LEXICAL_HIDDEN_DIM..(pos + 1) * LEXICAL_HIDDEN_DIM];
            row[1] = f64::from(u8::from(start[i]));
            row[2] = f64::from(u8::from(end[i]));
            row[3] = 1.0;
        }
        EncoderOutput::new(passage.id, LEXICAL_HIDDEN_DIM, hidden, kinds, offsets)
    }

    /// Start and end heads read the cues, the joint head rewards a start cue
    /// paired with an end cue, the passage head reads the overlap.
    fn reader_heads(&self) -> Result<ReaderHeads> {
        let h = LEXICAL_HIDDEN_DIM;
        let mut heads = ReaderHeads::zeros(h);
        heads.w_start[1] = 8.0;
        heads.w_end[2] = 8.0;
        heads.w_joint[2 * h + 1] = 8.0;
        heads.w_passage[0] = 4.0;
        Ok(heads)
    }

    /// Votes over cue-delimited spans, each passage weighted by the inverse
    /// of its rank.
    fn generate(&self, q: &QaExample, passages: &[PassageId]) -> Result<GeneratedAnswer> {
        let mut votes: Vec<(String, f64)> = Vec::new();
        let mut total = 0.0;
        for (rank, id) in passages.iter().enumerate() {
            let w = 1.0 / (rank + 1) as f64;
            for text in self.heuristic_spans(q, self.store.require(*id)?) {
                total += w;
                match votes.iter_mut().find(|(t, _)| *t == text) {
                    Some((_, v)) => *v += w,
                    None => votes.push((text, w)),
                }
            }
        }
        let mut best: Option<&(String, f64)> = None;
        for v in &votes {
            if best.map_or(true, |b| v.1 > b.1) {
                best = Some(v);
            }
        }
        let (text, w) = best.ok_or_else(|| Error::MissingScore("no answer candidate in the given passages".into()))?;
        Ok(GeneratedAnswer {
            text: text.clone(),
            logp: (w / total).ln(),
        })
    }

    /// Rank-weighted share of passages containing the span's tokens,
    /// smoothed so that unseen spans stay finite.
    fn span_logprobs(&self, _q: &QaExample, passages: &[PassageId], spans: &[String]) -> Result<HashMap<String, f64>> {
        let ctxs = passages
            .iter()
            .map(|id| Ok(tokenize_simple(&self.store.require(*id)?.context).tokens))
            .collect::<Result<Vec<_>>>()?;
        let z: f64 = (1..=passages.len()).map(|r| 1.0 / r as f64).sum::<f64>() + SPAN_SMOOTHING;
        Ok(spans
            .iter()
            .map(|s| {
                let toks = tokenize_simple(s).tokens;
                let w: f64 = ctxs
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| !toks.is_empty() && contains_exact(c, &toks))
                    .map(|(r, _)| 1.0 / (r + 1) as f64)
                    .sum();
                (s.clone(), ((w + SPAN_SMOOTHING) / z).ln())
            })
            .collect())
    }

    fn fingerprint(&self) -> String {
        fingerprint(&("lexical", self.store.len(), &self.idf))
    }
}
