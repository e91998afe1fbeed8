//! Extractive reader mathematics over ingested encoder states.
//!
//! Per passage the reader produces start, end, joint-boundary and passage
//! scores. Each of the four score families is normalized by one softmax that
//! pools every passage handed to the reader, so probabilities are comparable
//! across passages. Only context tokens can start or end an answer.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::annotate::Annotations;
use crate::corpus::{PassageId, PassageStore};
use crate::error::{Error, Result};
use crate::io::slice_chars;
use crate::math::{dot, logsumexp};

pub const ENCODER_MAGIC: &[u8; 8] = b"R2D2ENC1";
pub const MAX_SEQ_LEN: usize = 512;
pub const DEFAULT_MAX_SPAN_LEN: usize = 30;
const NO_OFFSET: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TokenKind {
    Cls = 0,
    Question = 1,
    Title = 2,
    Context = 3,
    Sep = 4,
}

impl TokenKind {
    fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            0 => TokenKind::Cls,
            1 => TokenKind::Question,
            2 => TokenKind::Title,
            3 => TokenKind::Context,
            4 => TokenKind::Sep,
            other => return Err(Error::Format(format!("unknown token kind {other}"))),
        })
    }
}

/// Encoder states for one (question, passage) input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub passage_id: PassageId,
    hidden_dim: usize,
    hidden: Vec<f64>,
    kinds: Vec<TokenKind>,
    offsets: Vec<Option<(u32, u32)>>,
}

impl EncoderOutput {
    pub fn new(
        passage_id: PassageId,
        hidden_dim: usize,
        hidden: Vec<f64>,
        kinds: Vec<TokenKind>,
        offsets: Vec<Option<(u32, u32)>>,
    ) -> Result<Self> {
        let t = kinds.len();
        if t == 0 || t > MAX_SEQ_LEN {
            return Err(Error::invalid(format!("sequence length {t} outside 1..={MAX_SEQ_LEN}")));
        }
        if hidden_dim == 0 {
            return Err(Error::invalid("hidden dimension must be positive"));
        }
        if offsets.len() != t {
            return Err(Error::DimensionMismatch { expected: t, got: offsets.len() });
        }
        if hidden.len() != t * hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: t * hidden_dim,
                got: hidden.len(),
            });
        }
        if kinds[0] != TokenKind::Cls || kinds[1..].contains(&TokenKind::Cls) {
            return Err(Error::invalid("CLS must appear exactly once, at position 0"));
        }
        if hidden.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite hidden state"));
        }
        for (k, o) in kinds.iter().zip(&offsets) {
            match (k, o) {
                (TokenKind::Context, None) => return Err(Error::invalid("context token without char offsets")),
                (_, Some((s, e))) if s > e => return Err(Error::invalid("char offsets end before start")),
                _ => {}
            }
        }
        Ok(EncoderOutput {
            passage_id,
            hidden_dim,
            hidden,
            kinds,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn hidden_row(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.hidden_dim..(i + 1) * self.hidden_dim]
    }

    pub fn kinds(&self) -> &[TokenKind] {
        &self.kinds
    }

    pub fn offsets(&self) -> &[Option<(u32, u32)>] {
        &self.offsets
    }

    pub fn context_mask(&self) -> Vec<bool> {
        self.kinds.iter().map(|k| *k == TokenKind::Context).collect()
    }

    /// `R2D2ENC1` bytes. Hidden states are stored as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let t = self.len();
        let mut out = Vec::with_capacity(16 + t * 9 + self.hidden.len() * 4);
        out.extend_from_slice(ENCODER_MAGIC);
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden_dim as u32).to_le_bytes());
        out.extend(self.kinds.iter().map(|k| *k as u8));
        for o in &self.offsets {
            let (s, e) = o.unwrap_or((NO_OFFSET, NO_OFFSET));
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&e.to_le_bytes());
        }
        for x in &self.hidden {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], passage_id: PassageId) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != ENCODER_MAGIC {
            return Err(Error::Format("missing R2D2ENC1 magic".into()));
        }
        let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if t > MAX_SEQ_LEN {
            return Err(Error::Format(format!("sequence length {t} exceeds {MAX_SEQ_LEN}")));
        }
        let need = t
            .checked_mul(h)
            .and_then(|th| th.checked_mul(4))
            .map(|hb| 16 + t * 9 + hb)
            .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
        if bytes.len() != need {
            return Err(Error::Format(format!("expected {need} bytes, found {}", bytes.len())));
        }
        let mut pos = 16;
        let kinds = bytes[pos..pos + t]
            .iter()
            .map(|b| TokenKind::from_u8(*b))
            .collect::<Result<Vec<_>>>()?;
        pos += t;
        let offsets = bytes[pos..pos + 8 * t]
            .chunks_exact(8)
            .map(|c| {
                let s = u32::from_le_bytes(c[..4].try_into().unwrap());
                let e = u32::from_le_bytes(c[4..].try_into().unwrap());
                (s != NO_OFFSET).then_some((s, e))
            })
            .collect();
        pos += 8 * t;
        let hidden = bytes[pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(passage_id, h, hidden, kinds, offsets).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>, passage_id: PassageId) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, passage_id)
    }
}

/// Trainable reader heads: start/end vectors, the joint bilinear map and the
/// passage vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderHeads {
    pub hidden_dim: usize,
    pub w_start: Vec<f64>,
    pub w_end: Vec<f64>,
    /// `h × h`, row-major.
    pub w_joint: Vec<f64>,
    pub b_joint: Vec<f64>,
    pub w_passage: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadsFile {
    hidden_dim: usize,
    w_start: String,
    w_end: String,
    w_joint: String,
    b_joint: String,
    w_passage: String,
}

fn encode_f32(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f32(s: &str, expected: usize, name: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Format(format!("{name}: bad base64: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!("{name}: expected {expected} floats, got {} bytes", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

impl ReaderHeads {
    pub fn zeros(h: usize) -> Self {
        ReaderHeads {
            hidden_dim: h,
            w_start: vec![0.0; h],
            w_end: vec![0.0; h],
            w_joint: vec![0.0; h * h],
            b_joint: vec![0.0; h],
            w_passage: vec![0.0; h],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim;
        for (name, v, n) in [
            ("w_start", &self.w_start, h),
            ("w_end", &self.w_end, h),
            ("w_joint", &self.w_joint, h * h),
            ("b_joint", &self.b_joint, h),
            ("w_passage", &self.w_passage, h),
        ] {
            if v.len() != n {
                return Err(Error::invalid(format!("{name} has {} values, expected {n}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("{name} is not finite")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&HeadsFile {
            hidden_dim: self.hidden_dim,
            w_start: encode_f32(&self.w_start),
            w_end: encode_f32(&self.w_end),
            w_joint: encode_f32(&self.w_joint),
            b_joint: encode_f32(&self.b_joint),
            w_passage: encode_f32(&self.w_passage),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: HeadsFile = serde_json::from_str(s)?;
        let h = f.hidden_dim;
        let heads = ReaderHeads {
            hidden_dim: h,
            w_start: decode_f32(&f.w_start, h, "w_start")?,
            w_end: decode_f32(&f.w_end, h, "w_end")?,
            w_joint: decode_f32(&f.w_joint, h * h, "w_joint")?,
            b_joint: decode_f32(&f.b_joint, h, "b_joint")?,
            w_passage: decode_f32(&f.w_passage, h, "w_passage")?,
        };
        heads.validate()?;
        Ok(heads)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Raw scores for one passage. `joint` holds the band `0 <= e - s < band`
/// at index `s * band + (e - s)`; entries with `e >= len` are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub passage_id: PassageId,
    pub band: usize,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub joint: Vec<f64>,
    pub passage: f64,
    pub context: Vec<bool>,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    pub fn joint_index(&self, s: usize, e: usize) -> Option<usize> {
        legal_span(&self.context, self.band, s, e).then_some(s * self.band + (e - s))
    }

    fn validate(&self) -> Result<()> {
        let t = self.start.len();
        if self.band == 0 {
            return Err(Error::invalid("span band must be at least 1"));
        }
        if self.end.len() != t || self.context.len() != t || self.joint.len() != t * self.band {
            return Err(Error::invalid(format!("score set for passage {} has inconsistent sizes", self.passage_id)));
        }
        let finite = self.start.iter().chain(&self.end).chain(&self.joint).all(|x| x.is_finite());
        if !finite || !self.passage.is_finite() {
            return Err(Error::invalid(format!("non-finite score in passage {}", self.passage_id)));
        }
        Ok(())
    }
}

fn legal_span(context: &[bool], band: usize, s: usize, e: usize) -> bool {
    s <= e && e < context.len() && e - s < band && context[s] && context[e]
}

pub fn compute_scores(enc: &EncoderOutput, heads: &ReaderHeads, max_span_len: usize) -> Result<ScoreSet> {
    heads.validate()?;
    let h = enc.hidden_dim();
    if heads.hidden_dim != h {
        return Err(Error::DimensionMismatch {
            expected: heads.hidden_dim,
            got: h,
        });
    }
    if max_span_len == 0 {
        return Err(Error::invalid("max_span_len must be at least 1"));
    }
    let t = enc.len();
    let start = (0..t).map(|i| dot(enc.hidden_row(i), &heads.w_start)).collect();
    let end = (0..t).map(|i| dot(enc.hidden_row(i), &heads.w_end)).collect();
    let mut joint = vec![0.0; t * max_span_len];
    let mut projected = vec![0.0; h];
    for s in 0..t {
        let hs = enc.hidden_row(s);
        for (r, out) in projected.iter_mut().enumerate() {
            *out = dot(&heads.w_joint[r * h..(r + 1) * h], hs) + heads.b_joint[r];
        }
        for d in 0..max_span_len.min(t - s) {
            joint[s * max_span_len + d] = dot(&projected, enc.hidden_row(s + d));
        }
    }
    Ok(ScoreSet {
        passage_id: enc.passage_id,
        band: max_span_len,
        start,
        end,
        joint,
        passage: dot(enc.hidden_row(0), &heads.w_passage),
        context: enc.context_mask(),
    })
}

/// Log-probabilities of one passage's tokens and spans under the pooled
/// distributions. Entries outside the support are `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageDist {
    pub passage_id: PassageId,
    pub band: usize,
    pub context: Vec<bool>,
    pub log_start: Vec<f64>,
    pub log_end: Vec<f64>,
    pub log_joint: Vec<f64>,
}

impl PassageDist {
    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }

    pub fn is_legal(&self, s: usize, e: usize) -> bool {
        legal_span(&self.context, self.band, s, e)
    }

    pub fn log_joint_at(&self, s: usize, e: usize) -> f64 {
        if self.is_legal(s, e) {
            self.log_joint[s * self.band + (e - s)]
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Legal `(start, end)` pairs with `e - s < max_len`.
    pub fn legal_spans(&self, max_len: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let t = self.len();
        let band = self.band.min(max_len);
        (0..t)
            .filter(|&s| self.context[s])
            .flat_map(move |s| (s..t.min(s + band)).filter(move |&e| self.context[e]).map(move |e| (s, e)))
    }
}

/// The four pooled distributions, in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    pub passages: Vec<PassageDist>,
    pub log_passage: Vec<f64>,
}

impl Distributions {
    /// Sums of the start, end, joint and passage distributions.
    pub fn totals(&self) -> [f64; 4] {
        let mut t = [0.0; 4];
        for p in &self.passages {
            t[0] += p.log_start.iter().map(|x| x.exp()).sum::<f64>();
            t[1] += p.log_end.iter().map(|x| x.exp()).sum::<f64>();
            t[2] += p.legal_spans(p.band).map(|(s, e)| p.log_joint_at(s, e).exp()).sum::<f64>();
        }
        t[3] = self.log_passage.iter().map(|x| x.exp()).sum();
        t
    }

    fn index_of(&self, id: PassageId) -> Option<usize> {
        self.passages.iter().position(|p| p.passage_id == id)
    }
}

/// One softmax per score family over the supports pooled across passages.
pub fn normalize(sets: &[ScoreSet]) -> Result<Distributions> {
    if sets.is_empty() {
        return Err(Error::Empty("no passages to normalize".into()));
    }
    let mut seen = HashSet::new();
    for s in sets {
        s.validate()?;
        if !seen.insert(s.passage_id) {
            return Err(Error::DuplicateId(s.passage_id));
        }
    }
    let token_lse = |pick: fn(&ScoreSet) -> &Vec<f64>| {
        logsumexp(
            sets.iter()
                .flat_map(|s| pick(s).iter().zip(&s.context).filter(|(_, c)| **c).map(|(x, _)| *x))
                .collect::<Vec<_>>(),
        )
    };
    let start_lse = token_lse(|s| &s.start);
    if start_lse == f64::NEG_INFINITY {
        return Err(Error::Empty("no context tokens in any passage".into()));
    }
    let end_lse = token_lse(|s| &s.end);
    let joint_lse = logsumexp(
        sets.iter()
            .flat_map(|s| {
                let band = s.band;
                (0..s.len()).flat_map(move |a| {
                    (a..s.len().min(a + band))
                        .filter(move |&b| legal_span(&s.context, band, a, b))
                        .map(move |b| s.joint[a * band + (b - a)])
                })
            })
            .collect::<Vec<_>>(),
    );
    let passage_lse = logsumexp(sets.iter().map(|s| s.passage).collect::<Vec<_>>());

    let passages = sets
        .iter()
        .map(|s| {
            let masked = |xs: &[f64], lse: f64| -> Vec<f64> {
                xs.iter()
                    .zip(&s.context)
                    .map(|(x, c)| if *c { x - lse } else { f64::NEG_INFINITY })
                    .collect()
            };
            let mut log_joint = vec![f64::NEG_INFINITY; s.joint.len()];
            for a in 0..s.len() {
                for b in a..s.len().min(a + s.band) {
                    if legal_span(&s.context, s.band, a, b) {
                        let i = a * s.band + (b - a);
                        log_joint[i] = s.joint[i] - joint_lse;
                    }
                }
            }
            PassageDist {
                passage_id: s.passage_id,
                band: s.band,
                context: s.context.clone(),
                log_start: masked(&s.start, start_lse),
                log_end: masked(&s.end, end_lse),
                log_joint,
            }
        })
        .collect();
    Ok(Distributions {
        passages,
        log_passage: sets.iter().map(|s| s.passage - passage_lse).collect(),
    })
}

/// Which distributions multiply into a span's score: `I` (start × end),
/// `J` (joint boundary) and `C` (passage).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Factorization {
    pub independent: bool,
    pub joint: bool,
    pub passage: bool,
}

impl Factorization {
    pub const FULL: Factorization = Factorization {
        independent: true,
        joint: true,
        passage: true,
    };

    /// All non-empty subsets.
    pub fn all() -> Vec<Factorization> {
        (1u8..8)
            .map(|bits| Factorization {
                independent: bits & 1 != 0,
                joint: bits & 2 != 0,
                passage: bits & 4 != 0,
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        !(self.independent || self.joint || self.passage)
    }

    fn log_score(&self, dist: &Distributions, v: usize, s: usize, e: usize) -> f64 {
        let p = &dist.passages[v];
        let mut total = 0.0;
        if self.independent {
            total += p.log_start[s] + p.log_end[e];
        }
        if self.joint {
            total += p.log_joint_at(s, e);
        }
        if self.passage {
            total += dist.log_passage[v];
        }
        total
    }
}

impl fmt::Display for Factorization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.independent {
            parts.push("I");
        }
        if self.joint {
            parts.push("J");
        }
        if self.passage {
            parts.push("C");
        }
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for Factorization {
    type Err = Error;

    /// Letters `I`, `J`, `C` in any order, optionally separated by `+`.
    fn from_str(s: &str) -> Result<Self> {
        let mut f = Factorization {
            independent: false,
            joint: false,
            passage: false,
        };
        for ch in s.chars().filter(|c| !matches!(c, '+' | ' ' | ',')) {
            match ch.to_ascii_uppercase() {
                'I' => f.independent = true,
                'J' => f.joint = true,
                'C' => f.passage = true,
                other => return Err(Error::invalid(format!("unknown factor {other:?}"))),
            }
        }
        if f.is_empty() {
            return Err(Error::invalid("empty factorization"));
        }
        Ok(f)
    }
}

/// A decoded answer candidate and the per-component log-probabilities that
/// later feed fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub passage_id: PassageId,
    pub start_tok: usize,
    /// Inclusive.
    pub end_tok: usize,
    pub text: String,
    /// Log of the (unnormalized) product of the selected factors.
    pub logp_e: f64,
    pub logp_g: Option<f64>,
    pub logp_r: Option<f64>,
    pub logp_rr: Option<f64>,
}

#[derive(Clone, Copy)]
struct Ranked {
    score: f64,
    passage_id: PassageId,
    start: usize,
    end: usize,
}

// Ordering: Less means "ranks earlier". Score descending, then passage id,
// start, and shorter span.
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.passage_id.cmp(&other.passage_id))
            .then(self.start.cmp(&other.start))
            .then(self.end.cmp(&other.end))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

/// Top-`m` legal spans under the product of the selected factors. `text` is
/// left empty; see [`attach_text`].
pub fn decode_spans(
    dist: &Distributions,
    factorization: Factorization,
    m: usize,
    max_span_len: usize,
) -> Result<Vec<AnswerSpan>> {
    if factorization.is_empty() {
        return Err(Error::invalid("empty factorization"));
    }
    if m == 0 {
        return Err(Error::invalid("M must be at least 1"));
    }
    check_span_len(dist, max_span_len)?;
    let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(m + 1);
    for (v, p) in dist.passages.iter().enumerate() {
        for (s, e) in p.legal_spans(max_span_len) {
            let cand = Ranked {
                score: factorization.log_score(dist, v, s, e),
                passage_id: p.passage_id,
                start: s,
                end: e,
            };
            if heap.len() < m {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        }
    }
    Ok(heap
        .into_sorted_vec()
        .into_iter()
        .map(|r| AnswerSpan {
            passage_id: r.passage_id,
            start_tok: r.start,
            end_tok: r.end,
            text: String::new(),
            logp_e: r.score,
            logp_g: None,
            logp_r: None,
            logp_rr: None,
        })
        .collect())
}

fn check_span_len(dist: &Distributions, max_span_len: usize) -> Result<()> {
    if max_span_len == 0 {
        return Err(Error::invalid("max_span_len must be at least 1"));
    }
    if let Some(p) = dist.passages.iter().find(|p| p.band < max_span_len) {
        return Err(Error::invalid(format!(
            "max_span_len {max_span_len} exceeds the scored band {} of passage {}",
            p.band, p.passage_id
        )));
    }
    Ok(())
}

/// Log of the sum of span scores over every legal span, for turning the raw
/// product into a distribution over spans.
pub fn span_log_partition(dist: &Distributions, factorization: Factorization, max_span_len: usize) -> Result<f64> {
    check_span_len(dist, max_span_len)?;
    let scores: Vec<f64> = dist
        .passages
        .iter()
        .enumerate()
        .flat_map(|(v, p)| p.legal_spans(max_span_len).map(move |(s, e)| factorization.log_score(dist, v, s, e)))
        .collect();
    Ok(logsumexp(scores))
}

/// Fills `text` from each span's character offsets into its passage context.
pub fn attach_text(spans: &mut [AnswerSpan], encoders: &[EncoderOutput], store: &PassageStore) -> Result<()> {
    let by_id: HashMap<PassageId, &EncoderOutput> = encoders.iter().map(|e| (e.passage_id, e)).collect();
    for span in spans {
        let enc = by_id
            .get(&span.passage_id)
            .ok_or_else(|| Error::invalid(format!("no encoder output for passage {}", span.passage_id)))?;
        let (Some((from, _)), Some((_, to))) = (enc.offsets()[span.start_tok], enc.offsets()[span.end_tok]) else {
            return Err(Error::invalid("span endpoint without char offsets"));
        };
        let ctx = &store.require(span.passage_id)?.context;
        span.text = slice_chars(ctx, from as usize, to as usize).to_string();
    }
    Ok(())
}

/// Target annotations in encoder token positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReaderTargets {
    pub starts: BTreeSet<(PassageId, usize)>,
    pub ends: BTreeSet<(PassageId, usize)>,
    pub boundaries: BTreeSet<(PassageId, usize, usize)>,
    pub positives: BTreeSet<PassageId>,
}

impl ReaderTargets {
    /// Maps character-level annotations onto encoder tokens whose offsets
    /// begin (start) or finish (end) at the same characters. Annotations that
    /// do not align with any token pair are dropped.
    pub fn from_annotations(ann: &Annotations, encoders: &[EncoderOutput]) -> Self {
        let mut t = ReaderTargets::default();
        for span in &ann.spans {
            let Some(enc) = encoders.iter().find(|e| e.passage_id == span.passage_id) else {
                continue;
            };
            let pos = |want: usize, use_start: bool| {
                enc.kinds().iter().zip(enc.offsets()).position(|(k, o)| {
                    *k == TokenKind::Context
                        && o.is_some_and(|(a, b)| if use_start { a as usize == want } else { b as usize == want })
                })
            };
            if let (Some(s), Some(e)) = (pos(span.start_char, true), pos(span.end_char, false)) {
                if s <= e {
                    t.starts.insert((span.passage_id, s));
                    t.ends.insert((span.passage_id, e));
                    t.boundaries.insert((span.passage_id, s, e));
                    t.positives.insert(span.passage_id);
                }
            }
        }
        t
    }
}

/// Gradient of the loss with respect to one passage's raw scores, laid out
/// like [`ScoreSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrads {
    pub passage_id: PassageId,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub joint: Vec<f64>,
    pub passage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderLoss {
    pub loss: f64,
    /// Start, end, joint and passage terms.
    pub terms: [f64; 4],
    pub grads: Vec<ScoreGrads>,
}

fn marginal_term(support: &[(f64, bool)]) -> (f64, Vec<f64>) {
    // support: (log p_i, is_target)
    let log_target = logsumexp(support.iter().filter(|(_, t)| *t).map(|(l, _)| *l).collect::<Vec<_>>());
    let grad = support
        .iter()
        .map(|(l, t)| {
            let p = l.exp();
            if *t {
                p - (l - log_target).exp()
            } else {
                p
            }
        })
        .collect();
    (-log_target, grad)
}

/// Independently marginalized negative log-likelihood of the start, end,
/// boundary and passage annotations, with analytic gradients.
pub fn reader_loss(dist: &Distributions, targets: &ReaderTargets) -> Result<ReaderLoss> {
    for (name, empty) in [
        ("starts", targets.starts.is_empty()),
        ("ends", targets.ends.is_empty()),
        ("boundaries", targets.boundaries.is_empty()),
        ("positive passages", targets.positives.is_empty()),
    ] {
        if empty {
            return Err(Error::InvalidAnnotation(format!("no {name}")));
        }
    }
    let locate = |id: PassageId| {
        dist.index_of(id)
            .ok_or_else(|| Error::InvalidAnnotation(format!("passage {id} is not among the reader inputs")))
    };
    for &(id, i) in targets.starts.iter().chain(&targets.ends) {
        let p = &dist.passages[locate(id)?];
        if i >= p.len() || !p.context[i] {
            return Err(Error::InvalidAnnotation(format!("token {i} of passage {id} is not a context token")));
        }
    }
    for &(id, s, e) in &targets.boundaries {
        if !dist.passages[locate(id)?].is_legal(s, e) {
            return Err(Error::InvalidAnnotation(format!("span ({s},{e}) of passage {id} is not a legal span")));
        }
    }
    for &id in &targets.positives {
        locate(id)?;
    }

    let mut grads: Vec<ScoreGrads> = dist
        .passages
        .iter()
        .map(|p| ScoreGrads {
            passage_id: p.passage_id,
            start: vec![0.0; p.len()],
            end: vec![0.0; p.len()],
            joint: vec![0.0; p.log_joint.len()],
            passage: 0.0,
        })
        .collect();

    let mut token_term = |log: fn(&PassageDist) -> &Vec<f64>,
                          wanted: &BTreeSet<(PassageId, usize)>,
                          slot: fn(&mut ScoreGrads) -> &mut Vec<f64>| {
        let mut support = Vec::new();
        let mut where_ = Vec::new();
        for (v, p) in dist.passages.iter().enumerate() {
            for i in (0..p.len()).filter(|&i| p.context[i]) {
                support.push((log(p)[i], wanted.contains(&(p.passage_id, i))));
                where_.push((v, i));
            }
        }
        let (term, g) = marginal_term(&support);
        for ((v, i), gi) in where_.into_iter().zip(g) {
            slot(&mut grads[v])[i] = gi;
        }
        term
    };
    let start_term = token_term(|p| &p.log_start, &targets.starts, |g| &mut g.start);
    let end_term = token_term(|p| &p.log_end, &targets.ends, |g| &mut g.end);

    let mut support = Vec::new();
    let mut where_ = Vec::new();
    for (v, p) in dist.passages.iter().enumerate() {
        for (s, e) in p.legal_spans(p.band) {
            support.push((p.log_joint_at(s, e), targets.boundaries.contains(&(p.passage_id, s, e))));
            where_.push((v, s * p.band + (e - s)));
        }
    }
    let (joint_term, g) = marginal_term(&support);
    for ((v, i), gi) in where_.into_iter().zip(g) {
        grads[v].joint[i] = gi;
    }

    let support: Vec<(f64, bool)> = dist
        .passages
        .iter()
        .zip(&dist.log_passage)
        .map(|(p, l)| (*l, targets.positives.contains(&p.passage_id)))
        .collect();
    let (passage_term, g) = marginal_term(&support);
    for (gr, gi) in grads.iter_mut().zip(g) {
        gr.passage = gi;
    }

    let terms = [start_term, end_term, joint_term, passage_term];
    Ok(ReaderLoss {
        loss: terms.iter().sum(),
        terms,
        grads,
    })
}

/// Passages ordered by their passage score, ties by id.
pub fn passage_rerank_by_reader(sets: &[ScoreSet]) -> Vec<PassageId> {
    let mut order: Vec<(f64, PassageId)> = sets.iter().map(|s| (s.passage, s.passage_id)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, id)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(passage_id: PassageId, rows: &[&[f64]], kinds: &[TokenKind]) -> EncoderOutput {
        let h = rows[0].len();
        let offsets = kinds
            .iter()
            .enumerate()
            .map(|(i, k)| (*k == TokenKind::Context).then_some((i as u32 * 2, i as u32 * 2 + 1)))
            .collect();
        EncoderOutput::new(passage_id, h, rows.concat(), kinds.to_vec(), offsets).unwrap()
    }

    use TokenKind::*;

    #[test]
    fn hand_scores() {
        let e = enc(0, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]], &[Cls, Context, Context]);
        let mut heads = ReaderHeads::zeros(2);
        let zero = compute_scores(&e, &heads, 3).unwrap();
        assert!(zero.start.iter().chain(&zero.end).chain(&zero.joint).all(|x| *x == 0.0));
        heads.w_start = vec![2.0, 3.0];
        heads.w_joint = vec![1.0, 0.0, 0.0, 1.0];
        let s = compute_scores(&e, &heads, 3).unwrap();
        assert_eq!(s.start, vec![2.0, 3.0, 5.0]);
        // identity bilinear map: joint = hidden[s] · hidden[e]
        for a in 0..3 {
            for b in a..3 {
                assert_eq!(s.joint[a * 3 + (b - a)], dot(e.hidden_row(a), e.hidden_row(b)));
            }
        }
        assert!(compute_scores(&e, &ReaderHeads::zeros(3), 3).is_err());
    }

    #[test]
    fn encoder_validation_and_round_trip() {
        let e = enc(4, &[&[1.0, 0.5], &[0.25, 1.0], &[1.0, -1.0]], &[Cls, Question, Context]);
        let back = EncoderOutput::from_bytes(&e.to_bytes(), 4).unwrap();
        assert_eq!(back, e);
        assert!(EncoderOutput::new(0, 1, vec![0.0, 0.0], vec![Context, Cls], vec![Some((0, 1)), None]).is_err());
        assert!(EncoderOutput::new(0, 1, vec![0.0; 2], vec![Cls, Cls], vec![None, None]).is_err());
        let bytes = e.to_bytes();
        assert!(EncoderOutput::from_bytes(&bytes[..bytes.len() - 2], 4).is_err());
    }

    #[test]
    fn heads_json_round_trip() {
        let mut h = ReaderHeads::zeros(2);
        h.w_start = vec![0.5, -2.0];
        h.w_joint = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(ReaderHeads::from_json(&h.to_json().unwrap()).unwrap(), h);
    }

    fn set(id: PassageId, start: &[f64], end: &[f64], context: &[bool], band: usize, passage: f64) -> ScoreSet {
        let t = start.len();
        let joint = (0..t * band).map(|i| (i as f64 * 0.37).sin()).collect();
        ScoreSet {
            passage_id: id,
            band,
            start: start.to_vec(),
            end: end.to_vec(),
            joint,
            passage,
            context: context.to_vec(),
        }
    }

    #[test]
    fn single_context_token() {
        let s = set(0, &[3.0, 1.0], &[0.0, 2.0], &[false, true], 2, 0.7);
        let d = normalize(&[s]).unwrap();
        assert_eq!(d.passages[0].log_start[1], 0.0);
        assert_eq!(d.passages[0].log_end[1], 0.0);
        assert_eq!(d.log_passage[0], 0.0);
        for f in Factorization::all() {
            let spans = decode_spans(&d, f, 5, 2).unwrap();
            assert_eq!(spans.len(), 1);
            assert_eq!((spans[0].start_tok, spans[0].end_tok), (1, 1));
        }
    }

    #[test]
    fn identical_passages_split_mass() {
        let a = set(0, &[0.0, 1.0, 2.0], &[1.0, 0.0, 1.0], &[false, true, true], 2, 1.3);
        let mut b = a.clone();
        b.passage_id = 1;
        let d = normalize(&[a, b]).unwrap();
        assert!((d.log_passage[0].exp() - 0.5).abs() < 1e-15);
        for t in d.totals() {
            assert!((t - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_support_rejected() {
        let s = set(0, &[1.0], &[1.0], &[false], 1, 0.0);
        assert!(matches!(normalize(&[s]), Err(Error::Empty(_))));
        assert!(normalize(&[]).is_err());
    }

    #[test]
    fn independent_factor_picks_argmaxes() {
        let mut start = vec![0.0; 7];
        let mut end = vec![0.0; 7];
        start[2] = 20.0;
        end[4] = 20.0;
        let ctx = [false, true, true, true, true, true, true];
        let d = normalize(&[set(9, &start, &end, &ctx, 5, 0.0)]).unwrap();
        let f: Factorization = "I".parse().unwrap();
        let top = &decode_spans(&d, f, 1, 5).unwrap()[0];
        assert_eq!((top.passage_id, top.start_tok, top.end_tok), (9, 2, 4));
        assert!(decode_spans(&d, f, 1, 6).is_err());
        assert!(decode_spans(&d, f, 0, 5).is_err());
    }

    #[test]
    fn loss_edge_values() {
        let mut start = vec![0.0, -50.0, 50.0];
        let ctx = [false, true, true];
        let s0 = set(0, &start, &[0.0, 0.0, 0.0], &ctx, 2, 0.0);
        start[2] = 0.0;
        let others: Vec<ScoreSet> = (1..4).map(|i| ScoreSet { passage_id: i, ..set(i, &start, &[0.0; 3], &ctx, 2, 0.0) }).collect();
        let mut sets = vec![s0];
        sets.extend(others);
        let d = normalize(&sets).unwrap();
        let targets = ReaderTargets {
            starts: BTreeSet::from([(0, 2)]),
            ends: BTreeSet::from([(0, 2)]),
            boundaries: BTreeSet::from([(0, 1, 2)]),
            positives: BTreeSet::from([0]),
        };
        let l = reader_loss(&d, &targets).unwrap();
        assert!(l.terms[0] < 1e-15 + 4.0 * (-50f64).exp() * 2.0);
        assert!((l.terms[3] - 4f64.ln()).abs() < 1e-12);
        assert!(l.loss >= 0.0);

        let bad = ReaderTargets {
            starts: BTreeSet::from([(0, 0)]),
            ..targets.clone()
        };
        assert!(matches!(reader_loss(&d, &bad), Err(Error::InvalidAnnotation(_))));
        let empty = ReaderTargets {
            positives: BTreeSet::new(),
            ..targets
        };
        assert!(reader_loss(&d, &empty).is_err());
    }

    #[test]
    fn reader_passage_order() {
        let a = set(0, &[0.0], &[0.0], &[true], 1, 0.1);
        let b = set(1, &[0.0], &[0.0], &[true], 1, 0.9);
        assert_eq!(passage_rerank_by_reader(&[a.clone(), b]), vec![1, 0]);
        let c = set(2, &[0.0], &[0.0], &[true], 1, 0.1);
        assert_eq!(passage_rerank_by_reader(&[c, a]), vec![0, 2]);
    }

    #[test]
    fn factorization_parsing() {
        assert_eq!("I+J+C".parse::<Factorization>().unwrap(), Factorization::FULL);
        assert_eq!(Factorization::FULL.to_string(), "I+J+C");
        assert!("".parse::<Factorization>().is_err());
        assert!("X".parse::<Factorization>().is_err());
        assert_eq!(Factorization::all().len(), 7);
    }
}
