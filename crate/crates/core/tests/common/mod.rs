//! Planted-answer toy corpora and small helpers shared by the integration
//! tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use r2d2::corpus::{Passage, PassageId, PassageStore, QaExample};
use r2d2::pipeline::{FusionMode, GeneratedAnswer, LexicalProvider, Pipeline, PipelineConfig, ScoreProvider};
use r2d2::reader::{EncoderOutput, ReaderHeads};
use r2d2::reranker::{CandidateList, RerankScores};

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// Distinct six-letter pseudo-words, so nothing collides with English
/// question words.
pub struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    pub fn new(seed: u64) -> Self {
        Words {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: HashSet::new(),
        }
    }

    pub fn fresh(&mut self) -> String {
        loop {
            let w: String = (0..3)
                .map(|_| format!("{}{}", ONSETS.choose(&mut self.rng).unwrap(), VOWELS.choose(&mut self.rng).unwrap()))
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn capitalized(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

pub struct Toy {
    pub passages: Vec<Passage>,
    pub examples: Vec<QaExample>,
    /// Whether question `i`'s answer is written in passage `i`.
    pub planted: Vec<bool>,
}

impl Toy {
    pub fn store(&self) -> Arc<PassageStore> {
        Arc::new(PassageStore::from_passages(self.passages.clone()).unwrap())
    }
}

/// `n` questions of the form "what is the <attr> of <entity>?", one passage
/// each. Passage `i` states the answer unless `absent(i)`, in which case it
/// states a wrong value and the gold answer occurs nowhere.
pub fn planted_corpus(n: usize, seed: u64, absent: impl Fn(usize) -> bool, golden: impl Fn(usize) -> bool) -> Toy {
    let mut words = Words::new(seed);
    let filler: Vec<String> = (0..200).map(|_| words.fresh()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut passages = Vec::with_capacity(n);
    let mut examples = Vec::with_capacity(n);
    let mut planted = Vec::with_capacity(n);
    for i in 0..n {
        let attr = words.fresh();
        let entity = words.fresh();
        let answer = if rng.gen_bool(0.3) {
            format!("{} {}", capitalized(&words.fresh()), capitalized(&words.fresh()))
        } else {
            capitalized(&words.fresh())
        };
        let is_absent = absent(i);
        let stated = if is_absent { capitalized(&words.fresh()) } else { answer.clone() };
        let mut fill = |k: usize| {
            (0..k)
                .map(|_| filler.choose(&mut rng).unwrap().as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let before = fill(6);
        let after = fill(8);
        let context = format!("{before} the {attr} of {entity} is {stated} . {after} .");
        passages.push(Passage::new(i as PassageId, capitalized(&entity), context));
        examples.push(QaExample {
            question: format!("what is the {attr} of {entity}?"),
            answers: vec![answer],
            golden_passage_id: golden(i).then_some(i as PassageId),
        });
        planted.push(!is_absent);
    }
    Toy {
        passages,
        examples,
        planted,
    }
}

pub fn toy_config(fusion: FusionMode) -> PipelineConfig {
    PipelineConfig {
        k: 10,
        v: Some(4),
        v2: 4,
        m: 5,
        max_span_len: 10,
        fusion,
        ..PipelineConfig::default()
    }
}

pub fn lexical_pipeline(toy: &Toy, cfg: PipelineConfig) -> Pipeline {
    let store = toy.store();
    let lex = LexicalProvider::new(store.clone()).unwrap();
    let index = Arc::new(lex.build_index().unwrap());
    Pipeline::new(cfg, store, index, Arc::new(lex)).unwrap()
}

/// Lexical provider whose generator knows the gold answer for some
/// questions (with high confidence) and answers the rest wrongly (with low
/// confidence).
pub struct OracleGenerator {
    pub inner: LexicalProvider,
    pub known: HashMap<String, String>,
    pub known_logp: f64,
    pub unknown_logp: f64,
}

impl ScoreProvider for OracleGenerator {
    fn query_embedding(&self, q: &QaExample) -> r2d2::Result<Vec<f32>> {
        self.inner.query_embedding(q)
    }

    fn rerank_scores(&self, q: &QaExample, c: &CandidateList) -> r2d2::Result<RerankScores> {
        self.inner.rerank_scores(q, c)
    }

    fn encode(&self, q: &QaExample, p: &Passage) -> r2d2::Result<EncoderOutput> {
        self.inner.encode(q, p)
    }

    fn reader_heads(&self) -> r2d2::Result<ReaderHeads> {
        self.inner.reader_heads()
    }

    fn generate(&self, q: &QaExample, _passages: &[PassageId]) -> r2d2::Result<GeneratedAnswer> {
        Ok(match self.known.get(q.key()) {
            Some(a) => GeneratedAnswer {
                text: a.clone(),
                logp: self.known_logp,
            },
            None => GeneratedAnswer {
                text: "no idea".into(),
                logp: self.unknown_logp,
            },
        })
    }

    fn span_logprobs(&self, q: &QaExample, p: &[PassageId], s: &[String]) -> r2d2::Result<HashMap<String, f64>> {
        self.inner.span_logprobs(q, p, s)
    }
}

/// Generator knows exactly the questions whose answer is not planted.
pub fn oracle_pipeline(toy: &Toy, cfg: PipelineConfig) -> Pipeline {
    let store = toy.store();
    let lex = LexicalProvider::new(store.clone()).unwrap();
    let index = Arc::new(lex.build_index().unwrap());
    let known = toy
        .examples
        .iter()
        .zip(&toy.planted)
        .filter(|(_, p)| !**p)
        .map(|(e, _)| (e.key().to_string(), e.answers[0].clone()))
        .collect();
    let provider = OracleGenerator {
        inner: lex,
        known,
        known_logp: -0.05,
        unknown_logp: -3.0,
    };
    Pipeline::new(cfg, store, index, Arc::new(provider)).unwrap()
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut a = x.to_vec();
    let mut b = x.to_vec();
    a[i] += h;
    b[i] -= h;
    (f(&a) - f(&b)) / (2.0 * h)
}

/// `|a - n|` relative to the larger magnitude, with a floor so that
/// near-zero gradients are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}
