//! Distant-supervision span annotation.
//!
//! Answers are located inside passages in token space. Exact occurrences are
//! found by sliding-window comparison. When a golden passage holds no exact
//! occurrence, the best token-F1 sub-sequence is chosen with a bounded search:
//! spans are scanned by increasing length and every improvement of the best
//! F1 tightens the largest length still worth scanning to
//! `|a| * (|t| + |a| - s) / s`, where `t` is the new best span, `a` the answer
//! and `s` their shared-token count. No span at or above that length can beat
//! `t`, so the scan stops as soon as the current length reaches the limit.
//!
//! Ties between equal-F1 spans go to the shorter span, then the earlier start.
//! That is the order in which the bounded scan meets them, and the brute-force
//! oracle uses the same rule so the two are exactly comparable.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{PassageId, PassageStore, QaExample};
use crate::error::{Error, Result};

/// Tokens of a text with their character offsets (`end` exclusive).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub char_spans: Vec<(usize, usize)>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> TokenSeq;
}

/// Word-level tokenizer: maximal alphanumeric runs, every other visible
/// character on its own, lowercased.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleTokenizer;

impl Tokenizer for SimpleTokenizer {
    fn tokenize(&self, text: &str) -> TokenSeq {
        tokenize_simple(text)
    }
}

impl<F> Tokenizer for F
where
    F: Fn(&str) -> TokenSeq + Send + Sync,
{
    fn tokenize(&self, text: &str) -> TokenSeq {
        self(text)
    }
}

pub fn tokenize_simple(text: &str) -> TokenSeq {
    let mut seq = TokenSeq::default();
    let mut run: Option<(usize, String)> = None;
    let mut pos = 0;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            match run.as_mut() {
                Some((_, buf)) => buf.extend(ch.to_lowercase()),
                None => run = Some((pos, ch.to_lowercase().collect())),
            }
        } else {
            if let Some((start, buf)) = run.take() {
                seq.tokens.push(buf);
                seq.char_spans.push((start, pos));
            }
            if !ch.is_whitespace() {
                seq.tokens.push(ch.to_lowercase().collect());
                seq.char_spans.push((pos, pos + 1));
            }
        }
        pos += 1;
    }
    if let Some((start, buf)) = run.take() {
        seq.tokens.push(buf);
        seq.char_spans.push((start, pos));
    }
    seq
}

/// Inclusive token range with its F1 against the answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchSpan {
    pub start: usize,
    pub end: usize,
    pub f1: f64,
}

impl MatchSpan {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Counters from one soft-match run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Spans whose F1 was evaluated.
    pub examined: u64,
    /// First span length that was not scanned (scan stopped below it).
    pub stop_size: usize,
}

fn bag<T: Eq + Hash>(tokens: &[T]) -> HashMap<&T, usize> {
    let mut counts = HashMap::with_capacity(tokens.len());
    for t in tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts
}

fn shared_tokens<T: Eq + Hash>(a: &[T], b: &[T]) -> usize {
    let bag_b = bag(b);
    bag(a)
        .into_iter()
        .map(|(tok, n)| n.min(bag_b.get(tok).copied().unwrap_or(0)))
        .sum()
}

/// Token F1 with bag-of-tokens overlap: `2s / (|t| + |a|)`.
pub fn f1_overlap<T: Eq + Hash>(span: &[T], answer: &[T]) -> Result<f64> {
    if span.is_empty() || answer.is_empty() {
        return Err(Error::Empty("F1 of an empty span".into()));
    }
    let s = shared_tokens(span, answer);
    Ok(2.0 * s as f64 / (span.len() + answer.len()) as f64)
}

/// Largest span length that may still beat a span of length `span_len`
/// sharing `shared` tokens with an answer of length `answer_len`.
pub fn span_length_bound(span_len: usize, answer_len: usize, shared: usize) -> Result<f64> {
    if shared == 0 {
        return Err(Error::invalid("length bound undefined for zero shared tokens"));
    }
    if shared > answer_len || shared > span_len {
        return Err(Error::invalid(format!(
            "shared count {shared} exceeds span ({span_len}) or answer ({answer_len}) length"
        )));
    }
    let (t, a, s) = (span_len as f64, answer_len as f64, shared as f64);
    Ok(a * (t + a - s) / s)
}

pub fn exact_match_spans<T: Eq>(passage: &[T], answer: &[T]) -> Vec<MatchSpan> {
    if answer.is_empty() || answer.len() > passage.len() {
        return Vec::new();
    }
    passage
        .windows(answer.len())
        .enumerate()
        .filter(|(_, w)| *w == answer)
        .map(|(start, _)| MatchSpan {
            start,
            end: start + answer.len() - 1,
            f1: 1.0,
        })
        .collect()
}

pub fn contains_exact<T: Eq>(passage: &[T], answer: &[T]) -> bool {
    !answer.is_empty()
        && answer.len() <= passage.len()
        && passage.windows(answer.len()).any(|w| w == answer)
}

// Candidate F1 as the exact fraction 2s / (len + |a|); compared by
// cross-multiplication so ties are exact.
#[derive(Clone, Copy)]
struct Score {
    shared: usize,
    len: usize,
}

impl Score {
    fn beats(self, other: Score, answer_len: usize) -> bool {
        self.shared * (other.len + answer_len) > other.shared * (self.len + answer_len)
    }
}

/// Maps both sequences onto dense ids so window counts can live in a Vec.
fn encode<T: Eq + Hash>(passage: &[T], answer: &[T]) -> (Vec<usize>, Vec<usize>, usize) {
    let mut ids: HashMap<&T, usize> = HashMap::new();
    let mut id_of = |t| {
        let next = ids.len();
        *ids.entry(t).or_insert(next)
    };
    let a: Vec<usize> = answer.iter().map(&mut id_of).collect();
    let p: Vec<usize> = passage.iter().map(&mut id_of).collect();
    (p, a, ids.len())
}

pub fn soft_match<T: Eq + Hash>(passage: &[T], answer: &[T]) -> Option<MatchSpan> {
    soft_match_with_stats(passage, answer).0
}

/// Bounded best-F1 search, returning the scan counters as well.
pub fn soft_match_with_stats<T: Eq + Hash>(
    passage: &[T],
    answer: &[T],
) -> (Option<MatchSpan>, SearchStats) {
    let mut stats = SearchStats::default();
    if passage.is_empty() || answer.is_empty() {
        return (None, stats);
    }
    let (p, a, vocab) = encode(passage, answer);
    let alen = a.len();
    let mut need = vec![0usize; vocab];
    for &t in &a {
        need[t] += 1;
    }

    let mut best: Option<(usize, Score)> = None;
    // Length limit as the fraction num/den; starts at 2.
    let (mut limit_num, mut limit_den) = (2usize, 1usize);
    let mut size = 1;
    let mut have = vec![0usize; vocab];
    while size * limit_den < limit_num && size <= p.len() {
        have.iter_mut().for_each(|c| *c = 0);
        let mut shared = 0;
        for &t in &p[..size] {
            if have[t] < need[t] {
                shared += 1;
            }
            have[t] += 1;
        }
        for start in 0..=p.len() - size {
            if start > 0 {
                let out = p[start - 1];
                have[out] -= 1;
                if have[out] < need[out] {
                    shared -= 1;
                }
                let inc = p[start + size - 1];
                if have[inc] < need[inc] {
                    shared += 1;
                }
                have[inc] += 1;
            }
            stats.examined += 1;
            let cand = Score { shared, len: size };
            let improves = match best {
                None => shared > 0,
                Some((_, b)) => cand.beats(b, alen),
            };
            if improves {
                best = Some((start, cand));
                limit_num = alen * (size + alen - shared);
                limit_den = shared;
            }
        }
        size += 1;
    }
    stats.stop_size = size;
    let span = best.map(|(start, s)| MatchSpan {
        start,
        end: start + s.len - 1,
        f1: 2.0 * s.shared as f64 / (s.len + alen) as f64,
    });
    (span, stats)
}

pub fn soft_match_bruteforce<T: Eq + Hash>(passage: &[T], answer: &[T]) -> Option<MatchSpan> {
    soft_match_bruteforce_with_stats(passage, answer).0
}

/// Exhaustive enumeration of every span. Testing oracle for [`soft_match`].
pub fn soft_match_bruteforce_with_stats<T: Eq + Hash>(
    passage: &[T],
    answer: &[T],
) -> (Option<MatchSpan>, SearchStats) {
    let mut stats = SearchStats::default();
    if passage.is_empty() || answer.is_empty() {
        return (None, stats);
    }
    let need = bag(answer);
    let alen = answer.len();
    // (f1 numerator shared, len, start)
    let mut best: Option<(usize, usize, usize)> = None;
    for start in 0..passage.len() {
        let mut have: HashMap<&T, usize> = HashMap::new();
        let mut shared = 0;
        for end in start..passage.len() {
            let t = &passage[end];
            let c = have.entry(t).or_insert(0);
            if *c < need.get(t).copied().unwrap_or(0) {
                shared += 1;
            }
            *c += 1;
            stats.examined += 1;
            let len = end - start + 1;
            if shared == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bs, bl, bstart)) => {
                    let lhs = shared * (bl + alen);
                    let rhs = bs * (len + alen);
                    lhs > rhs || (lhs == rhs && (len < bl || (len == bl && start < bstart)))
                }
            };
            if better {
                best = Some((shared, len, start));
            }
        }
    }
    stats.stop_size = passage.len() + 1;
    let span = best.map(|(shared, len, start)| MatchSpan {
        start,
        end: start + len - 1,
        f1: 2.0 * shared as f64 / (len + alen) as f64,
    });
    (span, stats)
}

/// Result of a soft-match run audited against the length bound.
#[derive(Debug, Clone)]
pub struct SoftMatchAudit {
    pub result: Option<MatchSpan>,
    pub stats: SearchStats,
    /// Skipped spans whose F1 exceeds the returned best. Always zero when the
    /// bound is sound.
    pub bound_violations: u64,
}

/// Runs [`soft_match_with_stats`] and then scores every span the bounded scan
/// skipped, counting those that would have beaten the returned span.
pub fn audit_soft_match<T: Eq + Hash>(passage: &[T], answer: &[T]) -> SoftMatchAudit {
    let (result, stats) = soft_match_with_stats(passage, answer);
    let mut violations = 0;
    if !answer.is_empty() {
        let best_f1 = result.map_or(0.0, |s| s.f1);
        for size in stats.stop_size..=passage.len() {
            for start in 0..=passage.len() - size {
                let f1 = f1_overlap(&passage[start..start + size], answer).unwrap_or(0.0);
                if f1 > best_f1 {
                    violations += 1;
                }
            }
        }
    }
    SoftMatchAudit {
        result,
        stats,
        bound_violations: violations,
    }
}

/// Exact-match checks over passage text, parameterized by tokenizer.
pub struct Annotator<T: Tokenizer = SimpleTokenizer> {
    tokenizer: T,
}

impl Default for Annotator<SimpleTokenizer> {
    fn default() -> Self {
        Annotator {
            tokenizer: SimpleTokenizer,
        }
    }
}

impl<T: Tokenizer> Annotator<T> {
    pub fn new(tokenizer: T) -> Self {
        Annotator { tokenizer }
    }

    pub fn tokenizer(&self) -> &T {
        &self.tokenizer
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        self.tokenizer.tokenize(text)
    }

    /// True if any answer occurs as a contiguous token sequence in `text`.
    pub fn contains_any(&self, text: &str, answers: &[String]) -> bool {
        let passage = self.tokenize(text);
        answers.iter().any(|a| {
            let ans = self.tokenize(a);
            contains_exact(&passage.tokens, &ans.tokens)
        })
    }

    /// Distant-supervision annotations for the passages a reader sees.
    ///
    /// Exact matches of each answer are collected from every passage. In the
    /// golden passage an answer with no exact occurrence falls back to its
    /// single best soft match. Answers with neither are dropped. The golden
    /// passage is annotated even when it is not in `reader_passages`.
    pub fn annotate_example(
        &self,
        example: &QaExample,
        reader_passages: &[PassageId],
        store: &PassageStore,
    ) -> Result<Annotations> {
        let mut ids: Vec<PassageId> = reader_passages.to_vec();
        if let Some(g) = example.golden_passage_id {
            if !ids.contains(&g) {
                ids.push(g);
            }
        }
        let tokenized: Vec<(PassageId, TokenSeq)> = ids
            .iter()
            .map(|&id| Ok((id, self.tokenize(&store.require(id)?.context))))
            .collect::<Result<_>>()?;

        let mut spans: BTreeSet<(PassageId, usize, usize)> = BTreeSet::new();
        let mut records = Vec::new();
        for answer in &example.answers {
            let ans = self.tokenize(answer);
            if ans.is_empty() {
                continue;
            }
            for (pid, seq) in &tokenized {
                let exact = exact_match_spans(&seq.tokens, &ans.tokens);
                let found = if exact.is_empty() && Some(*pid) == example.golden_passage_id {
                    soft_match(&seq.tokens, &ans.tokens).into_iter().collect()
                } else {
                    exact
                };
                for m in found {
                    if spans.insert((*pid, m.start, m.end)) {
                        records.push(AnnotatedSpan {
                            passage_id: *pid,
                            start_tok: m.start,
                            end_tok: m.end,
                            start_char: seq.char_spans[m.start].0,
                            end_char: seq.char_spans[m.end].1,
                            f1: m.f1,
                        });
                    }
                }
            }
        }
        if records.is_empty() {
            return Err(Error::ShouldHaveBeenFiltered(format!(
                "no annotation for question {:?}",
                example.question
            )));
        }
        records.sort_by_key(|r| (r.passage_id, r.start_tok, r.end_tok));
        let positive_passages: BTreeSet<PassageId> = records.iter().map(|r| r.passage_id).collect();
        Ok(Annotations {
            question_key: example.key().to_string(),
            spans: records,
            positive_passages: positive_passages.into_iter().collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSpan {
    pub passage_id: PassageId,
    pub start_tok: usize,
    pub end_tok: usize,
    /// Character offsets into the passage context, end exclusive.
    pub start_char: usize,
    pub end_char: usize,
    pub f1: f64,
}

/// One line of the annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub question_key: String,
    pub spans: Vec<AnnotatedSpan>,
    pub positive_passages: Vec<PassageId>,
}

impl Annotations {
    pub fn starts(&self) -> BTreeSet<(PassageId, usize)> {
        self.spans.iter().map(|s| (s.passage_id, s.start_tok)).collect()
    }

    pub fn ends(&self) -> BTreeSet<(PassageId, usize)> {
        self.spans.iter().map(|s| (s.passage_id, s.end_tok)).collect()
    }

    pub fn boundaries(&self) -> BTreeSet<(PassageId, usize, usize)> {
        self.spans
            .iter()
            .map(|s| (s.passage_id, s.start_tok, s.end_tok))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize_simple("Plzeň, 2021").tokens, vec!["plzeň", ",", "2021"]);
        assert!(tokenize_simple("").is_empty());
        assert_eq!(tokenize_simple("a-b").tokens, vec!["a", "-", "b"]);
        let seq = tokenize_simple("Hi  there!");
        assert_eq!(seq.char_spans, vec![(0, 2), (4, 9), (9, 10)]);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_overlap(&toks("a b"), &toks("a b")).unwrap(), 1.0);
        assert_eq!(f1_overlap(&toks("a b"), &toks("b c")).unwrap(), 0.5);
        assert_eq!(f1_overlap(&toks("x y"), &toks("b c")).unwrap(), 0.0);
        assert!(f1_overlap::<String>(&[], &toks("a")).is_err());
        // bag semantics: repeated token counts once per occurrence in both
        assert_eq!(f1_overlap(&toks("a a"), &toks("a b")).unwrap(), 0.5);
    }

    #[test]
    fn exact_windows() {
        assert_eq!(exact_match_spans(&toks("x b c y"), &toks("b c")).len(), 1);
        let spans = exact_match_spans(&toks("a a a"), &toks("a a"));
        assert_eq!(
            spans.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>(),
            vec![(0, 1), (1, 2)]
        );
        assert!(exact_match_spans(&toks("x y"), &toks("b")).is_empty());
    }

    #[test]
    fn soft_match_hand_case() {
        let m = soft_match(&toks("x b y"), &toks("b c")).unwrap();
        assert_eq!((m.start, m.end), (1, 1));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(soft_match(&toks("x y z"), &toks("b c")), None);
        assert_eq!(soft_match_bruteforce(&toks("x y z"), &toks("b c")), None);
        let b = soft_match_bruteforce(&toks("x b y"), &toks("b c")).unwrap();
        assert_eq!((b.start, b.end), (1, 1));
    }

    #[test]
    fn single_token_passage() {
        let m = soft_match_bruteforce(&toks("b"), &toks("b c")).unwrap();
        assert_eq!((m.start, m.end), (0, 0));
        assert_eq!(soft_match(&toks("b"), &toks("b c")), Some(m));
    }

    #[test]
    fn longer_answer_needs_growth_beyond_initial_limit() {
        // best span is "b c d" (f1 = 6/7 vs 2/5 for a single token)
        let p = toks("x b c d y");
        let a = toks("b c d q");
        let m = soft_match(&p, &a).unwrap();
        assert_eq!((m.start, m.end), (1, 3));
        assert_eq!(Some(m), soft_match_bruteforce(&p, &a));
    }

    #[test]
    fn bound_values() {
        assert_eq!(span_length_bound(2, 2, 1).unwrap(), 6.0);
        assert_eq!(span_length_bound(3, 3, 3).unwrap(), 3.0);
        assert!(span_length_bound(2, 2, 0).is_err());
    }

    #[test]
    fn annotate_prefers_exact_and_falls_back_to_soft() {
        let store = PassageStore::from_passages(vec![
            Passage::new(0, "G", "the river flows through old town"),
            Passage::new(1, "R", "ask about the old town bridge"),
        ])
        .unwrap();
        let ann = Annotator::default();

        let exact = QaExample::new("q", &["old town"], Some(0));
        let a = ann.annotate_example(&exact, &[1], &store).unwrap();
        assert_eq!(a.boundaries().into_iter().collect::<Vec<_>>(), vec![(0, 4, 5), (1, 3, 4)]);
        assert!(a.spans.iter().all(|s| s.f1 == 1.0));
        assert_eq!(a.positive_passages, vec![0, 1]);

        let fuzzy = QaExample::new("q", &["river delta"], Some(0));
        let a = ann.annotate_example(&fuzzy, &[1], &store).unwrap();
        assert_eq!(a.spans.len(), 1);
        assert_eq!((a.spans[0].passage_id, a.spans[0].start_tok, a.spans[0].end_tok), (0, 1, 1));
        assert_eq!(&store.get(0).unwrap().context[a.spans[0].start_char..a.spans[0].end_char], "river");

        let none = QaExample::new("q", &["zebra"], Some(0));
        assert!(matches!(
            ann.annotate_example(&none, &[1], &store),
            Err(Error::ShouldHaveBeenFiltered(_))
        ));
    }

    #[test]
    fn multi_answer_union_is_deduplicated() {
        let store = PassageStore::from_passages(vec![
            Passage::new(0, "G", "alpha beta gamma alpha beta"),
            Passage::new(1, "R", "beta gamma"),
        ])
        .unwrap();
        let ex = QaExample::new("q", &["alpha beta", "beta", "alpha beta"], Some(0));
        let a = Annotator::default().annotate_example(&ex, &[0, 1], &store).unwrap();
        // set-union oracle over the per-answer exact matches
        let mut expected = BTreeSet::new();
        for ans in &ex.answers {
            for (pid, text) in [(0u64, "alpha beta gamma alpha beta"), (1, "beta gamma")] {
                for m in exact_match_spans(&toks(text), &toks(ans)) {
                    expected.insert((pid, m.start, m.end));
                }
            }
        }
        assert_eq!(a.boundaries(), expected);
        assert_eq!(a.spans.len(), expected.len());
    }
}
